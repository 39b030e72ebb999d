//! Plain-text point-cloud (XYZ) and mesh (OFF) files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{GeometryError, MeshRef, Point, PointCloud, Result};

fn io_err(path: &Path, e: std::io::Error) -> GeometryError {
    GeometryError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    }
}

fn parse_err(path: &str, line: usize, msg: impl Into<String>) -> GeometryError {
    GeometryError::Parse {
        path: path.to_string(),
        line,
        msg: msg.into(),
    }
}

fn parse_point(path: &str, line: usize, fields: &[&str]) -> Result<Point> {
    if fields.len() != 3 {
        return Err(parse_err(path, line, format!("expected 3 coordinates, found {}", fields.len())));
    }
    let mut p = [0.0; 3];
    for (slot, f) in p.iter_mut().zip(fields) {
        *slot = f
            .parse::<f64>()
            .map_err(|_| parse_err(path, line, format!("invalid number {f:?}")))?;
        if !slot.is_finite() {
            return Err(parse_err(path, line, "non-finite coordinate"));
        }
    }
    Ok(p)
}

/// Parses whitespace-separated XYZ text, one point per line. Blank lines and
/// `#` comments are skipped.
pub fn parse_xyz(text: &str, origin: &str) -> Result<PointCloud> {
    let mut pts = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        pts.push(parse_point(origin, i + 1, &fields)?);
    }
    if pts.is_empty() {
        return Err(parse_err(origin, 1, "no points"));
    }
    PointCloud::new(pts)
}

pub fn read_xyz(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_xyz(&text, &path.display().to_string())
}

pub fn format_xyz(cloud: &PointCloud) -> String {
    let mut out = String::new();
    for p in cloud.points() {
        // `{}` prints the shortest representation that parses back exactly
        writeln!(out, "{} {} {}", p[0], p[1], p[2]).unwrap();
    }
    out
}

pub fn write_xyz(path: &Path, cloud: &PointCloud) -> Result<()> {
    fs::write(path, format_xyz(cloud)).map_err(|e| io_err(path, e))
}

/// Parses an OFF mesh. Polygonal faces are fan-triangulated.
pub fn parse_off(text: &str, origin: &str) -> Result<MeshRef> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());

    let (ln, header) = lines.next().ok_or_else(|| parse_err(origin, 1, "empty file"))?;
    let mut head_fields = header.split_whitespace();
    if head_fields.next() != Some("OFF") {
        return Err(parse_err(origin, ln, "missing OFF header"));
    }
    // counts may follow the keyword on the same line
    let rest: Vec<&str> = head_fields.collect();
    let (ln, counts): (usize, Vec<&str>) = if rest.is_empty() {
        let (ln, l) = lines
            .next()
            .ok_or_else(|| parse_err(origin, ln + 1, "missing counts line"))?;
        (ln, l.split_whitespace().collect())
    } else {
        (ln, rest)
    };
    if counts.len() < 2 {
        return Err(parse_err(origin, ln, "counts line needs vertex and face counts"));
    }
    let parse_count = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| parse_err(origin, ln, format!("invalid count {s:?}")))
    };
    let (nv, nf) = (parse_count(counts[0])?, parse_count(counts[1])?);

    let mut pts = Vec::with_capacity(nv);
    for k in 0..nv {
        let (ln, l) = lines
            .next()
            .ok_or_else(|| parse_err(origin, ln, format!("expected {nv} vertices, found {k}")))?;
        let fields: Vec<&str> = l.split_whitespace().collect();
        pts.push(parse_point(origin, ln, &fields)?);
    }
    let mut tris = Vec::with_capacity(nf);
    for k in 0..nf {
        let (ln, l) = lines
            .next()
            .ok_or_else(|| parse_err(origin, ln, format!("expected {nf} faces, found {k}")))?;
        let fields: Vec<usize> = l
            .split_whitespace()
            .map(|s| s.parse::<usize>().map_err(|_| parse_err(origin, ln, format!("invalid index {s:?}"))))
            .collect::<Result<_>>()?;
        let (&arity, idx) = fields
            .split_first()
            .ok_or_else(|| parse_err(origin, ln, "empty face"))?;
        if arity < 3 || idx.len() < arity {
            return Err(parse_err(origin, ln, "face needs at least 3 vertex indices"));
        }
        if let Some(&bad) = idx[..arity].iter().find(|&&v| v >= nv) {
            return Err(parse_err(origin, ln, format!("vertex index {bad} out of range")));
        }
        for j in 1..arity - 1 {
            tris.push([idx[0], idx[j], idx[j + 1]]);
        }
    }
    if pts.is_empty() {
        return Err(parse_err(origin, ln, "mesh has no vertices"));
    }
    MeshRef::new(PointCloud::new(pts)?, tris)
}

pub fn read_off(path: &Path) -> Result<MeshRef> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_off(&text, &path.display().to_string())
}

pub fn format_off(mesh: &MeshRef) -> String {
    let mut out = String::from("OFF\n");
    writeln!(out, "{} {} 0", mesh.cloud().len(), mesh.triangles().len()).unwrap();
    for p in mesh.cloud().points() {
        writeln!(out, "{} {} {}", p[0], p[1], p[2]).unwrap();
    }
    for t in mesh.triangles() {
        writeln!(out, "3 {} {} {}", t[0], t[1], t[2]).unwrap();
    }
    out
}

pub fn write_off(path: &Path, mesh: &MeshRef) -> Result<()> {
    fs::write(path, format_off(mesh)).map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn three_line_xyz() {
        let c = parse_xyz("0 0 0\n1 2 3\n-1.5 0.25 1e-3\n", "t").unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c.point(2), [-1.5, 0.25, 1e-3]);
    }

    #[test]
    fn xyz_errors_carry_line_numbers() {
        let err = parse_xyz("0 0 0\n\n1 2\n", "f.xyz").unwrap_err();
        assert!(matches!(err, GeometryError::Parse { line: 3, .. }), "{err}");
        let err = parse_xyz("0 0 x\n", "f.xyz").unwrap_err();
        assert!(matches!(err, GeometryError::Parse { line: 1, .. }));
    }

    #[test]
    fn off_with_four_vertices_two_faces() {
        let text = "OFF\n4 2 0\n0 0 0\n1 0 0\n0 1 0\n1 1 0\n3 0 1 2\n3 1 3 2\n";
        let m = parse_off(text, "t").unwrap();
        assert_eq!(m.cloud().len(), 4);
        assert_eq!(m.triangles().len(), 2);
    }

    #[test]
    fn off_quad_is_fan_triangulated_and_errors_are_located() {
        let m = parse_off("OFF 4 1 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n", "t").unwrap();
        assert_eq!(m.triangles(), &[[0, 1, 2], [0, 2, 3]]);
        let err = parse_off("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 7\n", "t").unwrap_err();
        assert!(matches!(err, GeometryError::Parse { line: 6, .. }), "{err}");
        assert!(parse_off("PLY\n", "t").is_err());
        assert!(parse_off("OFF\n3 1 0\n0 0 0\n", "t").is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = PointCloud::new(vec![[0.1, 0.2, 0.3], [1.0 / 3.0, -2.5e-7, 7.0]]).unwrap();
        let m = MeshRef::new(c.clone(), vec![[0, 1, 1]]).unwrap();
        let px = dir.path().join("a.xyz");
        let po = dir.path().join("a.off");
        write_xyz(&px, &c).unwrap();
        write_off(&po, &m).unwrap();
        assert_eq!(read_xyz(&px).unwrap(), c);
        assert_eq!(read_off(&po).unwrap(), m);
        assert!(read_xyz(&dir.path().join("missing.xyz")).is_err());
    }

    proptest! {
        #[test]
        fn xyz_text_round_trip_is_exact(pts in prop::collection::vec(prop::array::uniform3(-1e6f64..1e6), 1..30)) {
            let c = PointCloud::new(pts).unwrap();
            prop_assert_eq!(parse_xyz(&format_xyz(&c), "p").unwrap(), c);
        }
    }
}
