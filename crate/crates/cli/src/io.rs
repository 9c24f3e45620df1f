//! Point-cloud and transform files: ASCII XYZ, ASCII PLY and CSV.
//!
//! Numbers are written with Rust's shortest round-trip formatting, so a
//! written cloud reads back bit for bit.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use kentreg::geometry::{PointCloud, RigidTransform, UnitVec3, Vec3};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Xyz,
    Ply,
    Csv,
}

impl Format {
    /// From the file extension; anything other than `.ply` or `.csv` is XYZ.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("ply") => Format::Ply,
            Some("csv") => Format::Csv,
            _ => Format::Xyz,
        }
    }
}

pub(crate) fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CliError::FileNotFound(path.to_path_buf()),
        std::io::ErrorKind::InvalidData => CliError::parse(path, "file is not valid UTF-8 text"),
        _ => CliError::Io {
            path: path.to_path_buf(),
            source: e,
        },
    })
}

pub(crate) fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn read_cloud(path: &Path) -> CliResult<PointCloud> {
    let text = read_text(path)?;
    let parsed = match Format::from_path(path) {
        Format::Xyz => parse_xyz(&text),
        Format::Ply => parse_ply(&text),
        Format::Csv => parse_csv(&text),
    };
    parsed.map_err(|m| CliError::parse(path, m))
}

pub fn write_cloud(path: &Path, cloud: &PointCloud) -> CliResult<()> {
    let text = match Format::from_path(path) {
        Format::Xyz => format_xyz(cloud),
        Format::Ply => format_ply(cloud),
        Format::Csv => format_csv(cloud),
    };
    write_text(path, &text)
}

fn number(token: &str, line: usize) -> Result<f64, String> {
    let v: f64 = token
        .trim()
        .parse()
        .map_err(|_| format!("line {line}: `{token}` is not a number"))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("line {line}: non-finite value `{token}`"))
    }
}

fn build(points: Vec<Vec3>, normals: Option<Vec<Vec3>>) -> Result<PointCloud, String> {
    if points.is_empty() {
        return Err("no points".into());
    }
    let cloud = match normals {
        Some(ns) => {
            let units: Option<Vec<UnitVec3>> = ns.iter().map(|v| UnitVec3::try_new(*v, 1e-12)).collect();
            match units {
                Some(u) => PointCloud::with_normals(points, u),
                // a zero normal anywhere: drop them all and estimate instead
                None => PointCloud::new(points),
            }
        }
        None => PointCloud::new(points),
    };
    cloud.map_err(|e| e.to_string())
}

/// One `x y z` per line; extra columns are ignored, blank lines and lines
/// starting with `#` are skipped.
pub fn parse_xyz(text: &str) -> Result<PointCloud, String> {
    let mut points = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 3 {
            return Err(format!("line {}: expected 3 coordinates, found {}", i + 1, fields.len()));
        }
        points.push(Vec3::new(
            number(fields[0], i + 1)?,
            number(fields[1], i + 1)?,
            number(fields[2], i + 1)?,
        ));
    }
    build(points, None)
}

struct PlyElement {
    name: String,
    count: usize,
    properties: Vec<String>,
}

/// ASCII PLY. Reads `x`, `y`, `z` (and `nx`, `ny`, `nz` when all present)
/// from the `vertex` element; other elements are skipped.
pub fn parse_ply(text: &str) -> Result<PointCloud, String> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == "ply" => {}
        _ => return Err("missing `ply` magic line".into()),
    }
    let mut elements: Vec<PlyElement> = Vec::new();
    let mut ascii = false;
    let mut header_done = false;
    for (i, raw) in lines.by_ref() {
        let fields: Vec<&str> = raw.split_whitespace().collect();
        match fields.as_slice() {
            ["format", "ascii", _] => ascii = true,
            ["format", other, ..] => return Err(format!("unsupported PLY format `{other}` (only ascii)")),
            ["element", name, count] => elements.push(PlyElement {
                name: name.to_string(),
                count: count
                    .parse()
                    .map_err(|_| format!("line {}: bad element count `{count}`", i + 1))?,
                properties: Vec::new(),
            }),
            ["property", "list", ..] => {
                let el = elements.last_mut().ok_or(format!("line {}: property before element", i + 1))?;
                el.properties.push(fields.last().copied().unwrap_or_default().to_string());
            }
            ["property", _, name] => {
                let el = elements.last_mut().ok_or(format!("line {}: property before element", i + 1))?;
                el.properties.push(name.to_string());
            }
            ["end_header"] => {
                header_done = true;
                break;
            }
            _ => {}
        }
    }
    if !header_done {
        return Err("header has no `end_header`".into());
    }
    if !ascii {
        return Err("missing `format ascii 1.0` line".into());
    }
    let mut body = lines.filter(|(_, l)| !l.trim().is_empty());
    let mut points = Vec::new();
    let mut normals: Option<Vec<Vec3>> = None;
    let mut found = false;
    for el in &elements {
        if el.name != "vertex" {
            for _ in 0..el.count {
                body.next().ok_or(format!("file ends inside element `{}`", el.name))?;
            }
            continue;
        }
        found = true;
        let col = |n: &str| el.properties.iter().position(|p| p == n);
        let (x, y, z) = match (col("x"), col("y"), col("z")) {
            (Some(x), Some(y), Some(z)) => (x, y, z),
            _ => return Err("vertex element lacks x, y or z".into()),
        };
        let nc = match (col("nx"), col("ny"), col("nz")) {
            (Some(a), Some(b), Some(c)) => Some((a, b, c)),
            _ => None,
        };
        let mut ns = Vec::new();
        for _ in 0..el.count {
            let (i, raw) = body.next().ok_or("file ends before all vertices were read")?;
            let fields: Vec<&str> = raw.split_whitespace().collect();
            if fields.len() < el.properties.len() {
                return Err(format!(
                    "line {}: expected {} values, found {}",
                    i + 1,
                    el.properties.len(),
                    fields.len()
                ));
            }
            let v = |k: usize| number(fields[k], i + 1);
            points.push(Vec3::new(v(x)?, v(y)?, v(z)?));
            if let Some((a, b, c)) = nc {
                ns.push(Vec3::new(v(a)?, v(b)?, v(c)?));
            }
        }
        if nc.is_some() {
            normals = Some(ns);
        }
    }
    if !found {
        return Err("no vertex element".into());
    }
    build(points, normals)
}

/// Comma-separated. A header row is optional; with one, the columns named
/// `x`, `y`, `z` (and `nx`, `ny`, `nz`) are used, otherwise the first three.
pub fn parse_csv(text: &str) -> Result<PointCloud, String> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut records = reader.records();
    let first = match records.next() {
        Some(r) => r.map_err(|e| e.to_string())?,
        None => return Err("no points".into()),
    };
    let numeric = first.iter().take(3).count() == 3 && first.iter().take(3).all(|f| f.parse::<f64>().is_ok());
    let (cols, normal_cols, pending) = if numeric {
        ((0, 1, 2), None, Some(first))
    } else {
        let col = |n: &str| first.iter().position(|h| h.eq_ignore_ascii_case(n));
        let cols = match (col("x"), col("y"), col("z")) {
            (Some(x), Some(y), Some(z)) => (x, y, z),
            _ => (0, 1, 2),
        };
        let normal_cols = match (col("nx"), col("ny"), col("nz")) {
            (Some(a), Some(b), Some(c)) => Some((a, b, c)),
            _ => None,
        };
        (cols, normal_cols, None)
    };
    let mut points = Vec::new();
    let mut normals = Vec::new();
    for (row, rec) in pending.into_iter().map(Ok).chain(records).enumerate() {
        let rec = rec.map_err(|e| e.to_string())?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(row + 1);
        let get = |k: usize| -> Result<f64, String> {
            number(rec.get(k).ok_or(format!("line {line}: missing column {}", k + 1))?, line)
        };
        points.push(Vec3::new(get(cols.0)?, get(cols.1)?, get(cols.2)?));
        if let Some((a, b, c)) = normal_cols {
            normals.push(Vec3::new(get(a)?, get(b)?, get(c)?));
        }
    }
    build(points, normal_cols.map(|_| normals))
}

fn push_row(out: &mut String, values: &[f64], sep: &str) {
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push_str(sep);
        }
        let _ = write!(out, "{v}");
    }
    out.push('\n');
}

fn rows(cloud: &PointCloud) -> impl Iterator<Item = Vec<f64>> + '_ {
    let normals = cloud.normals();
    cloud.points().iter().enumerate().map(move |(i, p)| {
        let mut r = vec![p.x, p.y, p.z];
        if let Some(ns) = normals {
            r.extend_from_slice(ns[i].as_slice());
        }
        r
    })
}

pub fn format_xyz(cloud: &PointCloud) -> String {
    let mut out = String::new();
    for r in rows(cloud) {
        push_row(&mut out, &r[..3], " ");
    }
    out
}

pub fn format_ply(cloud: &PointCloud) -> String {
    let mut out = String::from("ply\nformat ascii 1.0\n");
    let _ = writeln!(out, "element vertex {}", cloud.len());
    out.push_str("property double x\nproperty double y\nproperty double z\n");
    if cloud.normals().is_some() {
        out.push_str("property double nx\nproperty double ny\nproperty double nz\n");
    }
    out.push_str("end_header\n");
    for r in rows(cloud) {
        push_row(&mut out, &r, " ");
    }
    out
}

pub fn format_csv(cloud: &PointCloud) -> String {
    let mut out = String::from(if cloud.normals().is_some() { "x,y,z,nx,ny,nz\n" } else { "x,y,z\n" });
    for r in rows(cloud) {
        push_row(&mut out, &r, ",");
    }
    out
}

/// Twelve whitespace-separated reals: the rotation row by row, then the
/// translation.
pub fn read_transform(path: &Path) -> CliResult<RigidTransform> {
    let text = read_text(path)?;
    parse_transform(&text).map_err(|m| CliError::parse(path, m))
}

pub fn parse_transform(text: &str) -> Result<RigidTransform, String> {
    let values: Vec<f64> = text
        .lines()
        .filter(|l| !l.trim_start().starts_with('#'))
        .flat_map(str::split_whitespace)
        .map(|t| number(t, 0).map_err(|_| format!("`{t}` is not a number")))
        .collect::<Result<_, _>>()?;
    let values: [f64; 12] = values
        .try_into()
        .map_err(|v: Vec<f64>| format!("expected 12 values, found {}", v.len()))?;
    RigidTransform::from_row_major(&values).map_err(|e| e.to_string())
}

pub fn format_transform(t: &RigidTransform) -> String {
    let v = t.to_row_major();
    let mut out = String::new();
    for row in v.chunks(3) {
        push_row(&mut out, row, " ");
    }
    out
}

pub fn write_transform(path: &Path, t: &RigidTransform) -> CliResult<()> {
    write_text(path, &format_transform(t))
}
