//! Plain CSV tables with a header row. Floats are written in their shortest
//! round-trip form, so reading a table back reproduces it bit for bit.

use std::path::Path;

use crate::domain::{EnvPoint, RiskSample, Source};
use crate::error::{Error, Result};

pub fn write_table(path: &Path, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header = rdr.headers()?.iter().map(str::to_owned).collect();
    let rows = rdr
        .records()
        .map(|r| r.map(|rec| rec.iter().map(str::to_owned).collect()))
        .collect::<std::result::Result<_, _>>()?;
    Ok((header, rows))
}

pub fn z_header(d: usize) -> Vec<String> {
    (1..=d).map(|j| format!("z{j}")).collect()
}

pub fn num(s: &str, path: &Path) -> Result<f64> {
    s.parse().map_err(|e| Error::InvalidInput(format!("bad number {s:?} in {}: {e}", path.display())))
}

/// Points followed by named float columns.
pub fn write_points(path: &Path, points: &[Vec<f64>], names: &[&str], values: &[Vec<f64>]) -> Result<()> {
    let d = points.first().map_or(0, Vec::len);
    let mut header = z_header(d);
    header.extend(names.iter().map(|s| s.to_string()));
    let rows = points.iter().zip(values).map(|(p, v)| p.iter().chain(v).map(f64::to_string).collect());
    write_table(path, &header, rows)
}

/// Rows of a table of floats.
pub type Rows = Vec<Vec<f64>>;

/// Inverse of [`write_points`]: `(points, values)`.
pub fn read_points(path: &Path) -> Result<(Rows, Rows)> {
    let (header, rows) = read_table(path)?;
    let d = header.iter().take_while(|h| h.starts_with('z')).count();
    let mut pts = Vec::with_capacity(rows.len());
    let mut vals = Vec::with_capacity(rows.len());
    for r in rows {
        let all: Vec<f64> = r.iter().map(|s| num(s, path)).collect::<Result<_>>()?;
        pts.push(all[..d].to_vec());
        vals.push(all[d..].to_vec());
    }
    Ok((pts, vals))
}

pub fn write_samples(path: &Path, samples: &[RiskSample]) -> Result<()> {
    let d = samples.first().map_or(0, |s| s.z.dim());
    let mut header = z_header(d);
    header.extend(["risk".to_string(), "source".to_string()]);
    let rows = samples.iter().map(|s| {
        let mut r: Vec<String> = s.z.coords().iter().map(f64::to_string).collect();
        r.push(s.risk.to_string());
        r.push(match s.source {
            Source::Model => "model".into(),
            Source::True => "true".into(),
        });
        r
    });
    write_table(path, &header, rows)
}

pub fn read_samples(path: &Path) -> Result<Vec<RiskSample>> {
    let (header, rows) = read_table(path)?;
    let d = header.iter().take_while(|h| h.starts_with('z')).count();
    rows.into_iter()
        .map(|r| {
            let z: Vec<f64> = r[..d].iter().map(|s| num(s, path)).collect::<Result<_>>()?;
            let source = match r[d + 1].as_str() {
                "model" => Source::Model,
                "true" => Source::True,
                other => return Err(Error::InvalidInput(format!("unknown source {other:?} in {}", path.display()))),
            };
            RiskSample::new(EnvPoint(z), num(&r[d], path)?, source)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn samples_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        let s = vec![
            RiskSample::new(EnvPoint(vec![0.1 + 0.2, 1.0 / 3.0]), 11.500000000000002, Source::True).unwrap(),
            RiskSample::new(EnvPoint(vec![4.5, 6.5]), f64::MAX, Source::Model).unwrap(),
        ];
        write_samples(&p, &s).unwrap();
        assert_eq!(read_samples(&p).unwrap(), s);
    }

    #[test]
    fn points_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.csv");
        let pts = vec![vec![1e-300, -2.5], vec![std::f64::consts::PI, 7.0]];
        let vals = vec![vec![0.15, 1.0], vec![2.0 / 3.0, -0.0]];
        write_points(&p, &pts, &["a", "b"], &vals).unwrap();
        assert_eq!(read_points(&p).unwrap(), (pts, vals));
    }
}
