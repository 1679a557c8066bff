//! ASCII PLY reading and writing for vertex-only clouds.

use std::fmt::Write as _;
use std::path::Path;

use super::{Point, PointCloud};
use crate::error::{Error, Result};
use crate::tensor::Real;

pub type Rgb = [u8; 3];

/// Renders an ASCII PLY document with optional per-vertex colors.
pub fn to_ply_string(points: &[Point], colors: Option<&[Rgb]>) -> Result<String> {
    if let Some(c) = colors {
        if c.len() != points.len() {
            return Err(Error::shape("ply colors", &[points.len()], &[c.len()]));
        }
    }
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", points.len());
    s.push_str("property double x\nproperty double y\nproperty double z\n");
    if colors.is_some() {
        s.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    s.push_str("end_header\n");
    for (i, p) in points.iter().enumerate() {
        // `{:?}` on floats prints the shortest representation that round-trips.
        let _ = write!(s, "{:?} {:?} {:?}", p[0] as f64, p[1] as f64, p[2] as f64);
        if let Some(c) = colors {
            let _ = write!(s, " {} {} {}", c[i][0], c[i][1], c[i][2]);
        }
        s.push('\n');
    }
    Ok(s)
}

pub fn write_ply(path: &Path, points: &[Point], colors: Option<&[Rgb]>) -> Result<()> {
    let s = to_ply_string(points, colors)?;
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Parsed vertices and, when present, their colors.
#[derive(Clone, Debug, PartialEq)]
pub struct PlyData {
    pub points: Vec<Point>,
    pub colors: Option<Vec<Rgb>>,
}

pub fn parse_ply(text: &str, path: &Path) -> Result<PlyData> {
    let perr = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "ply")) => {}
        _ => return Err(perr(1, "missing 'ply' magic".into())),
    }
    let mut count: Option<usize> = None;
    let mut props: Vec<String> = Vec::new();
    let mut in_vertex = false;
    let mut header_done = false;
    for (i, line) in lines.by_ref() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["format", "ascii", _] => {}
            ["format", f, ..] => return Err(perr(i + 1, format!("unsupported format '{f}'"))),
            ["comment", ..] | [] => {}
            ["element", "vertex", n] => {
                count = Some(n.parse().map_err(|_| perr(i + 1, format!("bad vertex count '{n}'")))?);
                in_vertex = true;
            }
            ["element", name, _] => {
                return Err(perr(i + 1, format!("unsupported element '{name}'")));
            }
            ["property", _, name] if in_vertex => props.push(name.to_string()),
            ["end_header"] => {
                header_done = true;
                break;
            }
            _ => return Err(perr(i + 1, format!("unexpected header line '{line}'"))),
        }
    }
    if !header_done {
        return Err(perr(0, "missing end_header".into()));
    }
    let count = count.ok_or_else(|| perr(0, "missing vertex element".into()))?;
    let col = |name: &str| props.iter().position(|p| p == name);
    let (xi, yi, zi) = match (col("x"), col("y"), col("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err(perr(0, "vertex element lacks x, y, z".into())),
    };
    let rgb = match (col("red"), col("green"), col("blue")) {
        (Some(r), Some(g), Some(b)) => Some([r, g, b]),
        _ => None,
    };
    let mut points = Vec::with_capacity(count);
    let mut colors = rgb.map(|_| Vec::with_capacity(count));
    for (i, line) in lines {
        if points.len() == count {
            if line.trim().is_empty() {
                continue;
            }
            return Err(perr(i + 1, "more vertices than declared".into()));
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != props.len() {
            return Err(perr(
                i + 1,
                format!("expected {} values, found {}", props.len(), toks.len()),
            ));
        }
        let num = |k: usize| -> Result<Real> {
            toks[k]
                .parse::<f64>()
                .map(|v| v as Real)
                .map_err(|_| perr(i + 1, format!("bad number '{}'", toks[k])))
        };
        points.push([num(xi)?, num(yi)?, num(zi)?]);
        if let (Some(idx), Some(c)) = (rgb, colors.as_mut()) {
            let mut px = [0u8; 3];
            for (slot, &k) in px.iter_mut().zip(&idx) {
                *slot = toks[k]
                    .parse()
                    .map_err(|_| perr(i + 1, format!("bad color '{}'", toks[k])))?;
            }
            c.push(px);
        }
    }
    if points.len() != count {
        return Err(perr(0, format!("declared {count} vertices, found {}", points.len())));
    }
    Ok(PlyData { points, colors })
}

pub fn read_ply(path: &Path) -> Result<PlyData> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ply(&text, path)
}

pub fn read_ply_cloud(path: &Path) -> Result<PointCloud> {
    PointCloud::new(read_ply(path)?.points)
}
