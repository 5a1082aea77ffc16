//! File formats: path CSV, observation-record CSV, JSON records.
//!
//! Floats are written as decimal with 17 significant digits (`{:.16e}`),
//! which round-trips every finite `f64` bit-exactly through `str::parse`.

use crate::error::{Error, Result};
use crate::rough_path::{lift_piecewise_linear, EnhancedPath};
use crate::sde::ObservationRecord;
use std::io::{BufRead, Write};

/// 17-significant-digit decimal form; parses back to the identical bits.
pub fn format_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn parse_f64(s: &str, line: usize) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|e| Error::Parse(format!("line {line}: bad number {s:?}: {e}")))
}

/// Column pairs `(k, l)`, `k < l`, behind the `a{k+1}{l+1}` header names.
fn area_columns(dim: usize) -> Vec<(usize, usize)> {
    let mut cols = Vec::new();
    for k in 0..dim {
        for l in k + 1..dim {
            cols.push((k, l));
        }
    }
    cols
}

/// Write a path as CSV with header `t,y1..y{d},a12,a13,...`.
pub fn write_path_csv<W: Write>(path: &EnhancedPath, out: &mut W) -> Result<()> {
    let d = path.dim();
    let cols = area_columns(d);
    let mut header = String::from("t");
    for k in 0..d {
        header.push_str(&format!(",y{}", k + 1));
    }
    for &(k, l) in &cols {
        header.push_str(&format!(",a{}{}", k + 1, l + 1));
    }
    writeln!(out, "{header}")?;
    for i in 0..path.len() {
        let mut row = format_f64(path.times()[i]);
        for v in path.value(i) {
            row.push(',');
            row.push_str(&format_f64(*v));
        }
        let a = path.area(i);
        for &(k, l) in &cols {
            row.push(',');
            row.push_str(&format_f64(a[k * d + l]));
        }
        writeln!(out, "{row}")?;
    }
    Ok(())
}

pub fn path_to_csv_string(path: &EnhancedPath) -> String {
    let mut buf = Vec::new();
    write_path_csv(path, &mut buf).expect("writing to memory cannot fail");
    String::from_utf8(buf).expect("CSV is ASCII")
}

/// Read a path CSV. When area columns are absent the samples are lifted
/// piecewise-linearly; when present they are taken as the from-origin areas.
pub fn read_path_csv<R: BufRead>(reader: R, alpha: f64) -> Result<EnhancedPath> {
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty path CSV".into()))??;
    let tokens: Vec<&str> = header.trim().split(',').collect();
    if tokens.first() != Some(&"t") {
        return Err(Error::Parse(format!(
            "path CSV must start with a `t` column, got {:?}",
            tokens.first()
        )));
    }
    let d = tokens.iter().filter(|s| s.starts_with('y')).count();
    if d == 0 {
        return Err(Error::Parse("no y columns in path CSV".into()));
    }
    let n_area = tokens.iter().filter(|s| s.starts_with('a')).count();
    let cols = area_columns(d);
    let has_areas = n_area > 0;
    if has_areas && n_area != cols.len() {
        return Err(Error::Parse(format!(
            "expected {} area columns for dimension {d}, found {n_area}",
            cols.len()
        )));
    }
    let expected = 1 + d + if has_areas { cols.len() } else { 0 };
    let mut times = Vec::new();
    let mut values = Vec::new();
    let mut areas = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != expected {
            return Err(Error::Parse(format!(
                "line {}: expected {expected} fields, found {}",
                idx + 2,
                fields.len()
            )));
        }
        times.push(parse_f64(fields[0], idx + 2)?);
        for k in 0..d {
            values.push(parse_f64(fields[1 + k], idx + 2)?);
        }
        if has_areas {
            let mut mat = vec![0.0; d * d];
            for (ci, &(k, l)) in cols.iter().enumerate() {
                let v = parse_f64(fields[1 + d + ci], idx + 2)?;
                mat[k * d + l] = v;
                mat[l * d + k] = -v;
            }
            areas.extend_from_slice(&mat);
        }
    }
    if has_areas {
        EnhancedPath::new(times, d, values, areas, alpha)
    } else {
        lift_piecewise_linear(&times, d, &values, alpha)
    }
}

/// Write an `(X, Y)` record as CSV with header `t,x1..x{dx},y1..y{dy}`.
pub fn write_record_csv<W: Write>(record: &ObservationRecord, out: &mut W) -> Result<()> {
    let mut header = String::from("t");
    for j in 0..record.d_x {
        header.push_str(&format!(",x{}", j + 1));
    }
    for k in 0..record.d_y {
        header.push_str(&format!(",y{}", k + 1));
    }
    writeln!(out, "{header}")?;
    for i in 0..record.times.len() {
        let mut row = format_f64(record.times[i]);
        for v in record.x_at(i) {
            row.push(',');
            row.push_str(&format_f64(*v));
        }
        for v in record.y_at(i) {
            row.push(',');
            row.push_str(&format_f64(*v));
        }
        writeln!(out, "{row}")?;
    }
    Ok(())
}

/// Read an `(X, Y)` record CSV.
pub fn read_record_csv<R: BufRead>(reader: R) -> Result<ObservationRecord> {
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty record CSV".into()))??;
    let tokens: Vec<&str> = header.trim().split(',').collect();
    if tokens.first() != Some(&"t") {
        return Err(Error::Parse("record CSV must start with `t`".into()));
    }
    let d_x = tokens.iter().filter(|s| s.starts_with('x')).count();
    let d_y = tokens.iter().filter(|s| s.starts_with('y')).count();
    if d_x == 0 || d_y == 0 {
        return Err(Error::Parse("record CSV needs x and y columns".into()));
    }
    let mut times = Vec::new();
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != 1 + d_x + d_y {
            return Err(Error::Parse(format!(
                "line {}: expected {} fields, found {}",
                idx + 2,
                1 + d_x + d_y,
                fields.len()
            )));
        }
        times.push(parse_f64(fields[0], idx + 2)?);
        for j in 0..d_x {
            x.push(parse_f64(fields[1 + j], idx + 2)?);
        }
        for k in 0..d_y {
            y.push(parse_f64(fields[1 + d_x + k], idx + 2)?);
        }
    }
    Ok(ObservationRecord {
        times,
        d_x,
        d_y,
        x,
        y,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rough_path::sample_brownian_lift;
    use std::io::BufReader;

    #[test]
    fn float_format_roundtrips_bitwise() {
        for &x in &[
            0.0,
            -1.5,
            std::f64::consts::PI,
            1.0 / 3.0,
            -2.2250738585072014e-308,
            6.02e23,
        ] {
            let s = format_f64(x);
            let back: f64 = s.parse().unwrap();
            assert_eq!(x.to_bits(), back.to_bits(), "{s}");
        }
    }

    #[test]
    fn path_csv_roundtrip_is_bit_exact() {
        let p = sample_brownian_lift(3, 32, 1.0, 77, 0.4);
        let text = path_to_csv_string(&p);
        let q = read_path_csv(BufReader::new(text.as_bytes()), 0.4).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn plain_samples_are_lifted() {
        let text = "t,y1,y2\n0,0,0\n0.5,1,0\n1,1,1\n";
        let p = read_path_csv(BufReader::new(text.as_bytes()), 0.4).unwrap();
        assert_eq!(p.area(2)[1], 0.5);
    }

    #[test]
    fn malformed_csv_is_rejected() {
        let text = "t,y1\n0,0\n0.5\n";
        assert!(read_path_csv(BufReader::new(text.as_bytes()), 0.4).is_err());
        let text = "z,y1\n0,0\n";
        assert!(read_path_csv(BufReader::new(text.as_bytes()), 0.4).is_err());
    }
}
