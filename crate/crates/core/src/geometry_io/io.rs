use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{PointCloud, Vec3};
use crate::error::{argument, NptcError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudFormat {
    /// One point per line, `x y z` or `x y z nx ny nz`; `#` starts a comment line.
    XyzText,
    /// ASCII PLY 1.0 with a `vertex` element.
    PlyAscii,
}

impl CloudFormat {
    /// Guesses the format from the file extension (`.ply` or anything else as xyz).
    pub fn from_path(path: &Path) -> CloudFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("ply") => CloudFormat::PlyAscii,
            _ => CloudFormat::XyzText,
        }
    }
}

/// Loads a cloud without normalizing it. Normals are read iff records have 6 columns
/// and are rescaled to unit length.
pub fn load_cloud(path: &Path, format: CloudFormat) -> Result<PointCloud> {
    let text = fs::read_to_string(path)?;
    match format {
        CloudFormat::XyzText => parse_xyz(&text),
        CloudFormat::PlyAscii => parse_ply(&text),
    }
}

fn parse_numbers(line: &str, lineno: usize) -> Result<Vec<f64>> {
    line.split_whitespace()
        .map(|tok| {
            tok.parse::<f64>().map_err(|_| NptcError::Parse {
                line: lineno,
                message: format!("not a number: {tok:?}"),
            })
        })
        .collect()
}

#[derive(Default)]
struct Records {
    points: Vec<Vec3>,
    normals: Vec<Vec3>,
}

impl Records {
    fn push(&mut self, values: &[f64], with_normal: bool, lineno: usize) -> Result<()> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(NptcError::Parse {
                line: lineno,
                message: "non-finite value".into(),
            });
        }
        self.points
            .push(Vec3::new(values[0], values[1], values[2]));
        if with_normal {
            let n = Vec3::new(values[3], values[4], values[5]);
            let len = n.norm();
            if len == 0.0 {
                return Err(NptcError::Parse {
                    line: lineno,
                    message: "zero-length normal".into(),
                });
            }
            self.normals.push(n / len);
        }
        Ok(())
    }

    fn finish(self) -> Result<PointCloud> {
        if self.points.is_empty() {
            return Err(NptcError::EmptyCloud);
        }
        let mut cloud = PointCloud::new(self.points)?;
        if !self.normals.is_empty() {
            cloud.set_normals(self.normals)?;
        }
        Ok(cloud)
    }
}

fn parse_xyz(text: &str) -> Result<PointCloud> {
    let mut records = Records::default();
    let mut columns = None;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let values = parse_numbers(trimmed, lineno)?;
        if values.len() != 3 && values.len() != 6 {
            return Err(NptcError::Parse {
                line: lineno,
                message: format!("expected 3 or 6 columns, found {}", values.len()),
            });
        }
        match columns {
            None => columns = Some(values.len()),
            Some(c) if c != values.len() => {
                return Err(NptcError::Parse {
                    line: lineno,
                    message: format!("expected {c} columns, found {}", values.len()),
                })
            }
            _ => {}
        }
        records.push(&values, values.len() == 6, lineno)?;
    }
    records.finish()
}

fn parse_ply(text: &str) -> Result<PointCloud> {
    let mut lines = text.lines().enumerate();
    let bad = |line: usize, message: &str| NptcError::Parse {
        line,
        message: message.to_string(),
    };
    match lines.next() {
        Some((_, l)) if l.trim() == "ply" => {}
        _ => return Err(bad(1, "missing 'ply' magic")),
    }
    let mut vertex_count = None;
    let mut in_vertex = false;
    let mut props: Vec<String> = Vec::new();
    let mut saw_format = false;
    let mut header_end = None;
    for (i, line) in lines.by_ref() {
        let lineno = i + 1;
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["format", "ascii", _] => saw_format = true,
            ["format", ..] => return Err(bad(lineno, "only ascii PLY is supported")),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => {
                in_vertex = *name == "vertex";
                if in_vertex {
                    vertex_count = Some(
                        count
                            .parse::<usize>()
                            .map_err(|_| bad(lineno, "bad vertex count"))?,
                    );
                } else if vertex_count.is_none() {
                    return Err(bad(lineno, "vertex element must come first"));
                }
            }
            ["property", "list", ..] if in_vertex => {
                return Err(bad(lineno, "list properties on vertices are not supported"))
            }
            ["property", "list", ..] => {}
            ["property", _ty, name] => {
                if in_vertex {
                    props.push(name.to_string());
                }
            }
            ["end_header"] => {
                header_end = Some(lineno);
                break;
            }
            _ => return Err(bad(lineno, "unrecognized header line")),
        }
    }
    let header_end = header_end.ok_or_else(|| bad(1, "missing end_header"))?;
    if !saw_format {
        return Err(bad(header_end, "missing format line"));
    }
    let count = vertex_count.ok_or_else(|| bad(header_end, "no vertex element"))?;
    let find = |name: &str| props.iter().position(|p| p == name);
    let xyz = match (find("x"), find("y"), find("z")) {
        (Some(x), Some(y), Some(z)) => [x, y, z],
        _ => return Err(bad(header_end, "vertex element lacks x, y, z")),
    };
    let normal = match (find("nx"), find("ny"), find("nz")) {
        (Some(x), Some(y), Some(z)) => Some([x, y, z]),
        _ => None,
    };
    let mut records = Records::default();
    let mut read = 0;
    for (i, line) in lines {
        if read == count {
            break;
        }
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let values = parse_numbers(line, lineno)?;
        if values.len() != props.len() {
            return Err(bad(lineno, "vertex record has the wrong number of values"));
        }
        let mut rec = vec![values[xyz[0]], values[xyz[1]], values[xyz[2]]];
        if let Some(n) = normal {
            rec.extend([values[n[0]], values[n[1]], values[n[2]]]);
        }
        records.push(&rec, normal.is_some(), lineno)?;
        read += 1;
    }
    if read < count {
        return Err(bad(header_end + read, "fewer vertex records than declared"));
    }
    records.finish()
}

/// Linear blue-to-red colormap: `t = (s - min) / (max - min)` maps to
/// `(round(255 t), 0, round(255 (1 - t)))`. A constant field maps every value to `t = 0.5`.
pub fn scalar_colormap(scalars: &[f64]) -> Result<Vec<[u8; 3]>> {
    if scalars.iter().any(|s| !s.is_finite()) {
        return Err(argument("scalar field contains non-finite values"));
    }
    let min = scalars.iter().copied().fold(f64::INFINITY, f64::min);
    let max = scalars.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(scalars
        .iter()
        .map(|&s| {
            let t = if max > min { (s - min) / (max - min) } else { 0.5 };
            [
                (255.0 * t).round() as u8,
                0,
                (255.0 * (1.0 - t)).round() as u8,
            ]
        })
        .collect())
}

/// Writes an ASCII PLY with `x y z`, optional `red green blue` and any number of
/// extra float properties (each slice one value per point).
pub fn write_ply(
    path: &Path,
    cloud: &PointCloud,
    colors: Option<&[[u8; 3]]>,
    extra: &[(&str, &[f64])],
) -> Result<()> {
    let n = cloud.len();
    if let Some(c) = colors {
        if c.len() != n {
            return Err(argument(format!("{} colors for {n} points", c.len())));
        }
    }
    for (name, values) in extra {
        if values.len() != n {
            return Err(argument(format!(
                "property {name} has {} values for {n} points",
                values.len()
            )));
        }
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "ply")?;
    writeln!(w, "format ascii 1.0")?;
    writeln!(w, "element vertex {n}")?;
    for axis in ["x", "y", "z"] {
        writeln!(w, "property double {axis}")?;
    }
    if colors.is_some() {
        for c in ["red", "green", "blue"] {
            writeln!(w, "property uchar {c}")?;
        }
    }
    for (name, _) in extra {
        writeln!(w, "property double {name}")?;
    }
    writeln!(w, "end_header")?;
    for (i, p) in cloud.points().iter().enumerate() {
        write!(w, "{} {} {}", p.x, p.y, p.z)?;
        if let Some(c) = colors {
            write!(w, " {} {} {}", c[i][0], c[i][1], c[i][2])?;
        }
        for (_, values) in extra {
            write!(w, " {}", values[i])?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn export_ply_with_scalars(path: &Path, cloud: &PointCloud, scalars: &[f64]) -> Result<()> {
    if scalars.len() != cloud.len() {
        return Err(argument(format!(
            "{} scalars for {} points",
            scalars.len(),
            cloud.len()
        )));
    }
    let colors = scalar_colormap(scalars)?;
    write_ply(path, cloud, Some(&colors), &[])
}

pub fn export_ply_with_colors(path: &Path, cloud: &PointCloud, colors: &[[u8; 3]]) -> Result<()> {
    write_ply(path, cloud, Some(colors), &[])
}

/// Writes `x y z` (or `x y z nx ny nz` when normals are present) with round-trip precision.
pub fn write_xyz(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for (i, p) in cloud.points().iter().enumerate() {
        match cloud.normals() {
            Some(n) => writeln!(w, "{} {} {} {} {} {}", p.x, p.y, p.z, n[i].x, n[i].y, n[i].z)?,
            None => writeln!(w, "{} {} {}", p.x, p.y, p.z)?,
        }
    }
    w.flush()?;
    Ok(())
}
