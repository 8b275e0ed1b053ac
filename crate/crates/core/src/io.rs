//! Text and image artifacts: numeric CSV tables, metrics streams and PGM
//! heatmaps.
//!
//! Numbers are written in scientific notation with 17 significant digits,
//! which is enough to read back every `f64` bit for bit. Formatting never
//! depends on the locale.

use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::train::{EpochMetrics, MetricsSink};

/// Formats `x` with 17 significant digits.
pub fn format_f64(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        // "NaN", "inf" and "-inf" all parse back with `str::parse::<f64>`
        format!("{x}")
    }
}

/// Column names `prefix0, prefix1, ...`.
pub fn column_names(prefix: &str, dim: usize) -> Vec<String> {
    (0..dim).map(|j| format!("{prefix}{j}")).collect()
}

/// Writes a header row and one row per line of `rows`; every row is the
/// concatenation of the matching rows of the given blocks.
pub fn write_csv<W: Write>(out: W, header: &[String], blocks: &[&Tensor]) -> Result<()> {
    let n = blocks.first().map_or(0, |t| t.rows());
    let width: usize = blocks.iter().map(|t| t.cols()).sum();
    if blocks.iter().any(|t| t.rows() != n) {
        return Err(Error::InvalidArgument("CSV blocks have different row counts".into()));
    }
    if width != header.len() {
        return Err(Error::Dimension {
            expected: header.len(),
            got: width,
        });
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header).map_err(csv_err)?;
    let mut record = Vec::with_capacity(width);
    for i in 0..n {
        record.clear();
        for t in blocks {
            record.extend(t.row(i).iter().map(|&x| format_f64(x)));
        }
        w.write_record(&record).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv_file(path: impl AsRef<Path>, header: &[String], blocks: &[&Tensor]) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_csv(file, header, blocks)
}

/// A parsed numeric table.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvTable {
    /// Column names, if the first line was a header.
    pub header: Option<Vec<String>>,
    pub values: Tensor,
}

/// Reads a numeric CSV. The first line is taken as a header when any of its
/// fields is not a number. A file with no data rows yields a `[0, cols]`
/// table, where `cols` comes from the header (or is 0 for an empty file).
pub fn read_csv<R: Read>(input: R) -> Result<CsvTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut header = None;
    let mut data = Vec::new();
    let mut cols = None;
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(csv_err)?;
        if record.iter().all(str::is_empty) {
            continue;
        }
        let parsed: Option<Vec<f64>> = record.iter().map(|f| f.parse().ok()).collect();
        let row = match parsed {
            Some(row) => row,
            None if line == 0 => {
                header = Some(record.iter().map(str::to_owned).collect::<Vec<_>>());
                cols = Some(record.len());
                continue;
            }
            None => {
                return Err(Error::Format(format!("line {}: non-numeric field", line + 1)));
            }
        };
        match cols {
            Some(c) if c != row.len() => {
                return Err(Error::Format(format!(
                    "line {}: expected {c} fields, got {}",
                    line + 1,
                    row.len()
                )))
            }
            _ => cols = Some(row.len()),
        }
        data.extend(row);
    }
    let cols = cols.unwrap_or(0);
    let rows = if cols == 0 { 0 } else { data.len() / cols };
    Ok(CsvTable {
        header,
        values: Tensor::matrix(rows, cols, data)?,
    })
}

pub fn read_csv_file(path: impl AsRef<Path>) -> Result<CsvTable> {
    read_csv(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// Parses a single comma-separated row of numbers.
pub fn parse_row(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|f| {
            f.trim()
                .parse()
                .map_err(|_| Error::Format(format!("`{}` is not a number", f.trim())))
        })
        .collect()
}

/// Streams epoch metrics as CSV rows. Missing validation values are left
/// empty.
pub struct CsvMetricsWriter<W: Write> {
    out: csv::Writer<W>,
}

pub const METRICS_HEADER: [&str; 8] = [
    "epoch",
    "gan_a",
    "gan_b",
    "nll_a",
    "nll_b",
    "total",
    "val_mse_ab",
    "val_mse_ba",
];

impl<W: Write> CsvMetricsWriter<W> {
    pub fn new(out: W) -> Result<Self> {
        let mut out = csv::Writer::from_writer(out);
        out.write_record(METRICS_HEADER).map_err(csv_err)?;
        Ok(Self { out })
    }

    pub fn into_inner(self) -> Result<W> {
        self.out
            .into_inner()
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
    }
}

impl<W: Write> MetricsSink for CsvMetricsWriter<W> {
    fn record(&mut self, m: &EpochMetrics) -> Result<()> {
        let opt = |v: Option<f64>| v.map(format_f64).unwrap_or_default();
        self.out
            .write_record([
                m.epoch.to_string(),
                format_f64(m.gan_a),
                format_f64(m.gan_b),
                format_f64(m.nll_a),
                format_f64(m.nll_b),
                format_f64(m.total),
                opt(m.val_mse_ab),
                opt(m.val_mse_ba),
            ])
            .map_err(csv_err)?;
        self.out.flush()?;
        Ok(())
    }
}

/// Binary greyscale PGM (`P5`, maxval 255), row-major from the top row.
pub fn write_pgm<W: Write>(mut out: W, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height || width == 0 || height == 0 {
        return Err(Error::InvalidArgument(format!(
            "{} pixels for a {width}x{height} image",
            pixels.len()
        )));
    }
    write!(out, "P5\n{width} {height}\n255\n")?;
    out.write_all(pixels)?;
    out.flush()?;
    Ok(())
}

/// Parses a `P5` image written by [`write_pgm`]: `(width, height, pixels)`.
pub fn read_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = || Error::Format("not a P5 PGM with maxval 255".into());
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?);
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let (w, h): (usize, usize) = match (fields[1].parse(), fields[2].parse()) {
        (Ok(w), Ok(h)) => (w, h),
        _ => return Err(bad()),
    };
    if fields[0] != "P5" || fields[3] != "255" || bytes.len() != pos + w * h {
        return Err(bad());
    }
    Ok((w, h, bytes[pos..].to_vec()))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_survive_text_round_trip() {
        let xs = [0.1, -1.0 / 3.0, 1e-300, 123456789.123456789, f64::MIN_POSITIVE, -0.0, 2.0_f64.sqrt()];
        for x in xs {
            let s = format_f64(x);
            assert!(!s.contains(','));
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), x.to_bits(), "{s}");
        }
        assert_eq!(format_f64(0.5), "5.0000000000000000e-1");
    }

    #[test]
    fn csv_round_trip_with_header() {
        let a = Tensor::matrix(2, 2, vec![0.1, 0.2, -3.5, 1e-9]).unwrap();
        let b = Tensor::matrix(2, 1, vec![7.0, -0.0]).unwrap();
        let mut header = column_names("a", 2);
        header.extend(column_names("b", 1));
        let mut buf = Vec::new();
        write_csv(&mut buf, &header, &[&a, &b]).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("a0,a1,b0\n"), "{text}");
        let table = read_csv(&buf[..]).unwrap();
        assert_eq!(table.header.unwrap(), header);
        assert_eq!(table.values.shape(), &[2, 3]);
        assert_eq!(table.values.row(1), &[-3.5, 1e-9, -0.0]);
    }

    #[test]
    fn headerless_and_empty_inputs() {
        let t = read_csv("1,2\n3,4\n".as_bytes()).unwrap();
        assert!(t.header.is_none());
        assert_eq!(t.values.shape(), &[2, 2]);
        let e = read_csv("a0,a1\n".as_bytes()).unwrap();
        assert_eq!(e.values.shape(), &[0, 2]);
        assert_eq!(read_csv("".as_bytes()).unwrap().values.shape(), &[0, 0]);
        assert!(read_csv("1,2\n3\n".as_bytes()).is_err());
        assert!(read_csv("1,2\nx,4\n".as_bytes()).is_err());
    }

    #[test]
    fn metrics_rows() {
        let mut w = CsvMetricsWriter::new(Vec::new()).unwrap();
        let m = EpochMetrics {
            epoch: 3,
            gan_a: 1.0,
            gan_b: 2.0,
            nll_a: 3.0,
            nll_b: 4.0,
            total: 10.0,
            val_mse_ab: Some(0.25),
            val_mse_ba: None,
        };
        w.record(&m).unwrap();
        let text = String::from_utf8(w.into_inner().unwrap()).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], METRICS_HEADER.join(","));
        assert!(lines[1].starts_with("3,1.0000000000000000e0,"));
        assert!(lines[1].ends_with(",2.5000000000000000e-1,"));
    }

    #[test]
    fn pgm_layout() {
        let mut buf = Vec::new();
        write_pgm(&mut buf, 3, 2, &[0, 1, 2, 3, 4, 255]).unwrap();
        assert!(buf.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(read_pgm(&buf).unwrap(), (3, 2, vec![0, 1, 2, 3, 4, 255]));
        assert!(write_pgm(Vec::new(), 2, 2, &[0; 3]).is_err());
    }

    #[test]
    fn single_rows() {
        assert_eq!(parse_row(" 1.5, -2e-3 ").unwrap(), vec![1.5, -2e-3]);
        assert!(parse_row("1,,2").is_err());
    }
}
