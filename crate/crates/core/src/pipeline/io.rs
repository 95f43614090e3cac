//! Point-cloud files: ASCII PLY and CSV, 9 significant digits per coordinate.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{PointCloud, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CloudFormat {
    Ply,
    Csv,
}

impl CloudFormat {
    /// From the file extension, case-insensitive.
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "ply" => Some(CloudFormat::Ply),
            "csv" => Some(CloudFormat::Csv),
            _ => None,
        }
    }
}

/// `%.9g`: 9 significant digits, trailing zeros trimmed, exponent form
/// outside `1e-4 ≤ |x| < 1e9`.
pub fn format_coord(x: f64) -> String {
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        trim_zeros(format!("{x:.decimals$}"))
    } else {
        let mut out = trim_zeros(mantissa.to_string());
        let sign = if exp < 0 { '-' } else { '+' };
        let _ = write!(out, "e{sign}{:02}", exp.abs());
        out
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

fn write_with(path: &Path, body: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    body(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn ply_string(cloud: &PointCloud) -> String {
    let mut s = String::with_capacity(96 + cloud.len() * 36);
    let _ = write!(
        s,
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
        cloud.len()
    );
    for p in &cloud.points {
        let _ = writeln!(s, "{} {} {}", format_coord(p.x), format_coord(p.y), format_coord(p.z));
    }
    s
}

pub fn write_ply(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let text = ply_string(cloud);
    write_with(path.as_ref(), |w| w.write_all(text.as_bytes()))
}

pub fn write_csv(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["x", "y", "z"]).map_err(|e| csv_error(path, e))?;
    for p in &cloud.points {
        w.write_record([format_coord(p.x), format_coord(p.y), format_coord(p.z)])
            .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        parse_error(path, e.to_string())
    }
}

pub fn export_cloud(cloud: &PointCloud, path: impl AsRef<Path>, format: CloudFormat) -> Result<()> {
    match format {
        CloudFormat::Ply => write_ply(cloud, path),
        CloudFormat::Csv => write_csv(cloud, path),
    }
}

fn parse_error(path: &Path, detail: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

fn parse_xyz<'a>(path: &Path, line_no: usize, fields: impl Iterator<Item = &'a str>) -> Result<Vec3> {
    let v: Vec<f64> = fields
        .take(3)
        .map(|f| f.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| parse_error(path, format!("line {line_no}: {e}")))?;
    if v.len() != 3 {
        return Err(parse_error(path, format!("line {line_no}: expected 3 coordinates")));
    }
    let p = Vec3::new(v[0], v[1], v[2]);
    if !p.is_finite() {
        return Err(parse_error(path, format!("line {line_no}: non-finite coordinate")));
    }
    Ok(p)
}

/// ASCII PLY whose first three vertex properties are `x`, `y`, `z`. Extra
/// vertex properties are ignored; other elements must follow the vertices.
pub fn read_ply(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let mut next = |what: &str| -> Result<(usize, String)> {
        match lines.next() {
            Some((i, Ok(l))) => Ok((i + 1, l)),
            Some((_, Err(e))) => Err(Error::io(path, e)),
            None => Err(parse_error(path, format!("unexpected end of file, expected {what}"))),
        }
    };
    if next("magic")?.1.trim() != "ply" {
        return Err(parse_error(path, "missing `ply` magic"));
    }
    let mut vertices = None;
    let mut props = Vec::new();
    let mut in_vertex = false;
    loop {
        let (no, line) = next("end_header")?;
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["format", "ascii", _] => {}
            ["format", other, ..] => {
                return Err(parse_error(path, format!("line {no}: unsupported format {other}")))
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", "vertex", n] => {
                vertices = Some(
                    n.parse::<usize>()
                        .map_err(|e| parse_error(path, format!("line {no}: {e}")))?,
                );
                in_vertex = true;
            }
            ["element", ..] => in_vertex = false,
            ["property", .., name] if in_vertex => props.push(name.to_string()),
            ["property", ..] => {}
            ["end_header"] => break,
            _ => return Err(parse_error(path, format!("line {no}: unrecognised header line"))),
        }
    }
    let n = vertices.ok_or_else(|| parse_error(path, "no vertex element"))?;
    if props.len() < 3 || props[..3] != ["x", "y", "z"] {
        return Err(parse_error(path, "vertex properties must start with x y z"));
    }
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let (no, line) = next("vertex row")?;
        points.push(parse_xyz(path, no, line.split_whitespace())?);
    }
    Ok(PointCloud::new(points))
}

/// CSV with an `x,y,z` header.
pub fn read_csv(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header = r.headers().map_err(|e| csv_error(path, e))?.clone();
    if header.iter().take(3).collect::<Vec<_>>() != ["x", "y", "z"] {
        return Err(parse_error(path, "header must start with x,y,z"));
    }
    let mut points = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        points.push(parse_xyz(path, i + 2, rec.iter())?);
    }
    Ok(PointCloud::new(points))
}

pub fn import_cloud(path: impl AsRef<Path>, format: CloudFormat) -> Result<PointCloud> {
    match format {
        CloudFormat::Ply => read_ply(path),
        CloudFormat::Csv => read_csv(path),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coordinate_formatting() {
        let cases = [
            (0.0, "0"),
            (1.0, "1"),
            (-2.5, "-2.5"),
            (0.1, "0.1"),
            (1.0 / 3.0, "0.333333333"),
            (123456789.0, "123456789"),
            (1234567891.0, "1.23456789e+09"),
            (0.0001234, "0.0001234"),
            (0.00001234, "1.234e-05"),
            (-7.0e-12, "-7e-12"),
            (99999999.95, "100000000"),
        ];
        for (x, s) in cases {
            assert_eq!(format_coord(x), s, "{x}");
        }
    }

    fn sample() -> PointCloud {
        PointCloud::new(
            (0..10)
                .map(|i| {
                    let t = i as f64;
                    Vec3::new(t * 0.123456789123, -t / 7.0, 1e-7 * (t + 1.0))
                })
                .collect(),
        )
    }

    #[test]
    fn ply_round_trip_is_stable_in_decimal() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ply");
        let cloud = sample();
        write_ply(&cloud, &path).unwrap();
        let back = read_ply(&path).unwrap();
        assert_eq!(back.len(), 10);
        assert_eq!(ply_string(&back), std::fs::read_to_string(&path).unwrap());
        for (a, b) in cloud.points.iter().zip(&back.points) {
            assert!((*a - *b).norm() <= 1e-8 * a.norm().max(1e-6));
        }
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.csv");
        write_csv(&sample(), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("x,y,z\n0,-0,1e-07\n"), "{text}");
        let back = read_csv(&path).unwrap();
        let again = dir.path().join("b.csv");
        write_csv(&back, &again).unwrap();
        assert_eq!(text, std::fs::read_to_string(&again).unwrap());
    }

    #[test]
    fn empty_cloud_is_a_valid_ply() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.ply");
        write_ply(&PointCloud::new(vec![]), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("element vertex 0\n"));
        assert!(text.ends_with("end_header\n"));
        assert!(read_ply(&path).unwrap().is_empty());
    }

    #[test]
    fn malformed_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ply");
        for text in [
            "plx\n",
            "ply\nformat binary_little_endian 1.0\nend_header\n",
            "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n1 2 3\n",
            "ply\nformat ascii 1.0\nelement vertex 1\nproperty float y\nproperty float x\nproperty float z\nend_header\n1 2 3\n",
            "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nend_header\n1 nan 3\n",
        ] {
            std::fs::write(&path, text).unwrap();
            assert!(matches!(read_ply(&path), Err(Error::Parse { .. })), "{text}");
        }
        assert!(matches!(read_ply(dir.path().join("missing.ply")), Err(Error::Io { .. })));
    }

    #[test]
    fn extra_vertex_properties_are_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ply");
        std::fs::write(
            &path,
            "ply\nformat ascii 1.0\ncomment x\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nelement face 0\nproperty list uchar int vertex_indices\nend_header\n1 2 3 255\n",
        )
        .unwrap();
        assert_eq!(read_ply(&path).unwrap().points, vec![Vec3::new(1.0, 2.0, 3.0)]);
    }

    #[test]
    fn format_from_extension() {
        assert_eq!(CloudFormat::from_path(Path::new("a.PLY")), Some(CloudFormat::Ply));
        assert_eq!(CloudFormat::from_path(Path::new("a.csv")), Some(CloudFormat::Csv));
        assert_eq!(CloudFormat::from_path(Path::new("a.txt")), None);
    }
}
