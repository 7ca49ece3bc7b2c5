//! JSON and CSV writers. Every float goes out with 17 significant digits.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::Serialize;
use serde_json::ser::{Formatter, Serializer};

use crate::Failure;

pub fn float(v: f64) -> String {
    format!("{v:.16e}")
}

struct Precise;

impl Formatter for Precise {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        writer.write_all(float(value).as_bytes())
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, value as f64)
    }
}

pub fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = Vec::new();
    let mut ser = Serializer::with_formatter(&mut out, Precise);
    value.serialize(&mut ser).expect("serializing into memory");
    out
}

/// Writes `bytes` to `path`, or to stdout when `path` is `None`.
pub fn emit(path: Option<&Path>, bytes: &[u8]) -> Result<(), Failure> {
    match path {
        Some(p) => fs::write(p, bytes).map_err(|e| Failure::io(p, e)),
        None => {
            let mut out = io::stdout().lock();
            out.write_all(bytes)
                .and_then(|_| out.flush())
                .map_err(|e| Failure::io("<stdout>", e))
        }
    }
}

pub fn json_line<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = to_json(value);
    bytes.push(b'\n');
    bytes
}

/// `id,label,f0,…` rows, one per shape.
pub fn embeddings_csv(rows: &[(String, usize, Vec<f64>)], dim: usize) -> Result<Vec<u8>, Failure> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["id".to_string(), "label".to_string()];
    header.extend((0..dim).map(|i| format!("f{i}")));
    w.write_record(&header).map_err(Failure::csv)?;
    for (id, label, values) in rows {
        let mut record = vec![id.clone(), label.to_string()];
        record.extend(values.iter().map(|&v| float(v)));
        w.write_record(&record).map_err(Failure::csv)?;
    }
    w.into_inner().map_err(|e| Failure::csv(e.into_error().into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_keep_seventeen_digits() {
        assert_eq!(float(0.1), "1.0000000000000001e-1");
        assert_eq!(float(1.0), "1.0000000000000000e0");
        let text = String::from_utf8(to_json(&vec![0.1f64, -2.5])).unwrap();
        assert_eq!(text, "[1.0000000000000001e-1,-2.5000000000000000e0]");
        let back: Vec<f64> = serde_json::from_str(&text).unwrap();
        assert_eq!(back, vec![0.1, -2.5]);
    }

    #[test]
    fn every_float_round_trips() {
        for v in [f64::MIN_POSITIVE, 1e300, -1.0 / 3.0, 123456.789, 5e-324] {
            assert_eq!(float(v).parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn non_finite_becomes_null() {
        assert_eq!(to_json(&f64::NAN), b"null");
    }
}
