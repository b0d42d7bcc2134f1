//! Point cloud file I/O: PLY (ascii / binary little-endian), XYZ text and
//! the `{0,1}`-per-line label sidecar.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::Point3;

use crate::error::{Error, Result};
use crate::geometry::PointCloud;

/// On-disk PLY flavor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ScalarType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl ScalarType {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "char" | "int8" => Some(ScalarType::I8),
            "uchar" | "uint8" => Some(ScalarType::U8),
            "short" | "int16" => Some(ScalarType::I16),
            "ushort" | "uint16" => Some(ScalarType::U16),
            "int" | "int32" => Some(ScalarType::I32),
            "uint" | "uint32" => Some(ScalarType::U32),
            "float" | "float32" => Some(ScalarType::F32),
            "double" | "float64" => Some(ScalarType::F64),
            _ => None,
        }
    }

    fn size(&self) -> usize {
        match self {
            ScalarType::I8 | ScalarType::U8 => 1,
            ScalarType::I16 | ScalarType::U16 => 2,
            ScalarType::I32 | ScalarType::U32 | ScalarType::F32 => 4,
            ScalarType::F64 => 8,
        }
    }

    fn read_f64(&self, bytes: &[u8]) -> f64 {
        match self {
            ScalarType::I8 => bytes[0] as i8 as f64,
            ScalarType::U8 => bytes[0] as f64,
            ScalarType::I16 => i16::from_le_bytes([bytes[0], bytes[1]]) as f64,
            ScalarType::U16 => u16::from_le_bytes([bytes[0], bytes[1]]) as f64,
            ScalarType::I32 => i32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            ScalarType::U32 => u32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            ScalarType::F32 => f32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            ScalarType::F64 => f64::from_le_bytes(bytes[..8].try_into().unwrap()),
        }
    }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Sidecar path: `foo.ply` → `foo.labels.txt`.
pub fn label_sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("labels.txt")
}

struct PlyHeader {
    format: PlyFormat,
    vertex_count: usize,
    properties: Vec<(ScalarType, String)>,
    /// Byte offset of the binary payload / line index of the first data row.
    data_start: usize,
    header_lines: usize,
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<PlyHeader> {
    let mut format = None;
    let mut vertex_count = None;
    let mut properties = Vec::new();
    let mut in_vertex_element = false;
    let mut offset = 0usize;
    let mut line_no = 0usize;

    if !bytes.starts_with(b"ply") {
        return Err(parse_err(path, 1, "missing `ply` magic"));
    }

    loop {
        let rest = &bytes[offset..];
        let Some(nl) = rest.iter().position(|&b| b == b'\n') else {
            return Err(parse_err(path, line_no + 1, "header not terminated by end_header"));
        };
        let line = std::str::from_utf8(&rest[..nl])
            .map_err(|_| parse_err(path, line_no + 1, "non-UTF-8 header line"))?
            .trim_end_matches('\r');
        offset += nl + 1;
        line_no += 1;

        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            ["ply"] | ["comment", ..] | [] => {}
            ["format", f, "1.0"] => {
                format = Some(match *f {
                    "ascii" => PlyFormat::Ascii,
                    "binary_little_endian" => PlyFormat::BinaryLittleEndian,
                    other => {
                        return Err(parse_err(path, line_no, format!("unsupported format `{other}`")))
                    }
                });
            }
            ["element", "vertex", n] => {
                vertex_count = Some(n.parse::<usize>().map_err(|_| {
                    parse_err(path, line_no, format!("bad vertex count `{n}`"))
                })?);
                in_vertex_element = true;
            }
            ["element", name, n] => {
                let count: usize = n
                    .parse()
                    .map_err(|_| parse_err(path, line_no, format!("bad element count `{n}`")))?;
                if count > 0 {
                    return Err(parse_err(
                        path,
                        line_no,
                        format!("unsupported non-empty element `{name}`"),
                    ));
                }
                in_vertex_element = false;
            }
            ["property", "list", ..] => {
                return Err(parse_err(path, line_no, "list properties are not supported"));
            }
            ["property", ty, name] => {
                if in_vertex_element {
                    let ty = ScalarType::parse(ty).ok_or_else(|| {
                        parse_err(path, line_no, format!("unknown property type `{ty}`"))
                    })?;
                    properties.push((ty, name.to_string()));
                }
            }
            ["end_header"] => break,
            other => {
                return Err(parse_err(
                    path,
                    line_no,
                    format!("unrecognized header line `{}`", other.join(" ")),
                ));
            }
        }
    }

    let format = format.ok_or_else(|| parse_err(path, line_no, "missing format line"))?;
    let vertex_count =
        vertex_count.ok_or_else(|| parse_err(path, line_no, "missing vertex element"))?;
    for coord in ["x", "y", "z"] {
        if !properties.iter().any(|(_, n)| n == coord) {
            return Err(parse_err(path, line_no, format!("missing `{coord}` property")));
        }
    }
    Ok(PlyHeader {
        format,
        vertex_count,
        properties,
        data_start: offset,
        header_lines: line_no,
    })
}

fn parse_ply(path: &Path, bytes: &[u8]) -> Result<Vec<Point3<f64>>> {
    let header = parse_header(path, bytes)?;
    let find = |name: &str| header.properties.iter().position(|(_, n)| n == name).unwrap();
    let (ix, iy, iz) = (find("x"), find("y"), find("z"));
    let mut points = Vec::with_capacity(header.vertex_count);

    match header.format {
        PlyFormat::BinaryLittleEndian => {
            let stride: usize = header.properties.iter().map(|(t, _)| t.size()).sum();
            let offsets: Vec<usize> = header
                .properties
                .iter()
                .scan(0usize, |acc, (t, _)| {
                    let o = *acc;
                    *acc += t.size();
                    Some(o)
                })
                .collect();
            let payload = &bytes[header.data_start..];
            if payload.len() < stride * header.vertex_count {
                return Err(parse_err(
                    path,
                    header.header_lines,
                    format!(
                        "payload holds {} bytes, expected {} for {} vertices",
                        payload.len(),
                        stride * header.vertex_count,
                        header.vertex_count
                    ),
                ));
            }
            for v in 0..header.vertex_count {
                let row = &payload[v * stride..(v + 1) * stride];
                let coord = |idx: usize| {
                    let (ty, _) = header.properties[idx];
                    ty.read_f64(&row[offsets[idx]..])
                };
                points.push(Point3::new(coord(ix), coord(iy), coord(iz)));
            }
        }
        PlyFormat::Ascii => {
            let text = std::str::from_utf8(&bytes[header.data_start..])
                .map_err(|_| parse_err(path, header.header_lines + 1, "non-UTF-8 payload"))?;
            let mut rows = 0usize;
            for (i, line) in text.lines().enumerate() {
                let line_no = header.header_lines + 1 + i;
                if line.trim().is_empty() {
                    continue;
                }
                if rows == header.vertex_count {
                    return Err(parse_err(path, line_no, "more data rows than declared vertices"));
                }
                let tokens: Vec<&str> = line.split_whitespace().collect();
                if tokens.len() != header.properties.len() {
                    return Err(parse_err(
                        path,
                        line_no,
                        format!(
                            "expected {} values, found {}",
                            header.properties.len(),
                            tokens.len()
                        ),
                    ));
                }
                let coord = |idx: usize| -> Result<f64> {
                    tokens[idx]
                        .parse::<f64>()
                        .map_err(|_| parse_err(path, line_no, format!("bad number `{}`", tokens[idx])))
                };
                points.push(Point3::new(coord(ix)?, coord(iy)?, coord(iz)?));
                rows += 1;
            }
            if rows != header.vertex_count {
                return Err(parse_err(
                    path,
                    header.header_lines + 1,
                    format!("found {rows} rows, header declared {}", header.vertex_count),
                ));
            }
        }
    }
    Ok(points)
}

fn parse_xyz(path: &Path, bytes: &[u8]) -> Result<Vec<Point3<f64>>> {
    let text =
        std::str::from_utf8(bytes).map_err(|_| parse_err(path, 1, "non-UTF-8 XYZ file"))?;
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != 3 {
            return Err(parse_err(path, i + 1, format!("expected 3 values, found {}", tokens.len())));
        }
        let mut c = [0.0f64; 3];
        for (slot, t) in c.iter_mut().zip(&tokens) {
            *slot = t
                .parse()
                .map_err(|_| parse_err(path, i + 1, format!("bad number `{t}`")))?;
        }
        points.push(Point3::new(c[0], c[1], c[2]));
    }
    Ok(points)
}

/// Read one `{0,1}` per line.
pub fn load_labels(path: &Path) -> Result<Vec<u8>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        match line {
            "0" => labels.push(0),
            "1" => labels.push(1),
            other => return Err(parse_err(path, i + 1, format!("label `{other}` is not 0/1"))),
        }
    }
    Ok(labels)
}

/// Load a PLY or XYZ cloud. A `<name>.labels.txt` sidecar, when present,
/// supplies per-point labels and must match the point count. The category
/// defaults to the file stem.
pub fn load_cloud(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_lowercase();
    let points = match ext.as_str() {
        "ply" => parse_ply(path, &bytes)?,
        "xyz" | "txt" => parse_xyz(path, &bytes)?,
        other => return Err(Error::Data(format!("unsupported cloud format `.{other}`"))),
    };
    for (i, p) in points.iter().enumerate() {
        if !p.coords.iter().all(|c| c.is_finite()) {
            return Err(Error::Data(format!(
                "{}: non-finite coordinate at point {i}",
                path.display()
            )));
        }
    }
    let category = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("cloud")
        .to_string();

    let sidecar = label_sidecar_path(path);
    if sidecar.exists() {
        let labels = load_labels(&sidecar)?;
        if labels.len() != points.len() {
            return Err(Error::Data(format!(
                "{}: {} labels for {} points",
                sidecar.display(),
                labels.len(),
                points.len()
            )));
        }
        PointCloud::with_labels(points, labels, category)
    } else {
        PointCloud::new(points, category)
    }
}

/// Write a cloud as PLY (double-precision coordinates, bit-exact binary
/// round trip); labels, when present, go to the `.labels.txt` sidecar.
pub fn save_cloud(cloud: &PointCloud, path: &Path, format: PlyFormat) -> Result<()> {
    let mut out = Vec::new();
    let fmt = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    write!(
        out,
        "ply\nformat {fmt} 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nend_header\n",
        cloud.len()
    )
    .expect("in-memory write");
    match format {
        PlyFormat::Ascii => {
            for p in &cloud.points {
                writeln!(out, "{} {} {}", p.x, p.y, p.z).expect("in-memory write");
            }
        }
        PlyFormat::BinaryLittleEndian => {
            for p in &cloud.points {
                for c in [p.x, p.y, p.z] {
                    out.extend_from_slice(&c.to_le_bytes());
                }
            }
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))?;
    if let Some(labels) = &cloud.labels {
        let mut text = String::with_capacity(labels.len() * 2);
        for l in labels {
            text.push(if *l == 1 { '1' } else { '0' });
            text.push('\n');
        }
        let sidecar = label_sidecar_path(path);
        fs::write(&sidecar, text).map_err(|e| Error::io(&sidecar, e))?;
    }
    Ok(())
}

/// Score to color: `r = round(255·s)`, `g = 0`, `b = 255 − r` (linear
/// blue→red; 0.5 maps to `(128, 0, 127)` with round-half-away-from-zero).
pub fn score_color(score: f64) -> (u8, u8, u8) {
    let r = (score.clamp(0.0, 1.0) * 255.0).round() as u8;
    (r, 0, 255 - r)
}

/// Write an ascii PLY with per-point colors from the anomaly map.
pub fn export_colored(cloud: &PointCloud, map: &[f64], path: &Path) -> Result<()> {
    if map.len() != cloud.len() {
        return Err(Error::Data(format!(
            "map length {} does not match cloud size {}",
            map.len(),
            cloud.len()
        )));
    }
    let mut out = String::new();
    out.push_str(&format!(
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        cloud.len()
    ));
    for (p, &s) in cloud.points.iter().zip(map) {
        let (r, g, b) = score_color(s);
        out.push_str(&format!("{} {} {} {r} {g} {b}\n", p.x, p.y, p.z));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_cloud() -> PointCloud {
        PointCloud::with_labels(
            vec![
                Point3::new(0.1, -0.2, 0.3),
                Point3::new(1.0 / 3.0, 2.0_f64.sqrt(), -7.25),
                Point3::new(-1e-9, 5e8, 0.0),
            ],
            vec![0, 1, 0],
            "t",
        )
        .unwrap()
    }

    #[test]
    fn binary_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ply");
        let cloud = sample_cloud();
        save_cloud(&cloud, &path, PlyFormat::BinaryLittleEndian).unwrap();
        let loaded = load_cloud(&path).unwrap();
        for (a, b) in cloud.points.iter().zip(&loaded.points) {
            assert_eq!(a.x.to_bits(), b.x.to_bits());
            assert_eq!(a.y.to_bits(), b.y.to_bits());
            assert_eq!(a.z.to_bits(), b.z.to_bits());
        }
        assert_eq!(loaded.labels, cloud.labels);
    }

    #[test]
    fn ascii_round_trip_is_close() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ply");
        let cloud = sample_cloud();
        save_cloud(&cloud, &path, PlyFormat::Ascii).unwrap();
        let loaded = load_cloud(&path).unwrap();
        for (a, b) in cloud.points.iter().zip(&loaded.points) {
            assert!((a - b).norm() <= 1e-6 * (1.0 + a.coords.norm()));
        }
    }

    #[test]
    fn float32_ply_with_extra_properties_loads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ply");
        let mut bytes = Vec::new();
        write!(
            bytes,
            "ply\nformat binary_little_endian 1.0\ncomment scanner output\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nend_header\n"
        )
        .unwrap();
        for (p, c) in [([1.0f32, 2.0, 3.0], 10u8), ([-1.5, 0.0, 4.25], 200)] {
            for v in p {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            bytes.push(c);
        }
        fs::write(&path, bytes).unwrap();
        let cloud = load_cloud(&path).unwrap();
        assert_eq!(cloud.len(), 2);
        assert_eq!(cloud.points[1], Point3::new(-1.5, 0.0, 4.25));
    }

    #[test]
    fn xyz_file_loads_by_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.xyz");
        fs::write(&path, "0 0 0\n1 2 3\n# comment\n4 5 6\n").unwrap();
        let cloud = load_cloud(&path).unwrap();
        assert_eq!(cloud.len(), 3);
    }

    #[test]
    fn malformed_inputs_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.xyz");
        fs::write(&path, "0 0 0\n1 2\n").unwrap();
        match load_cloud(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }

        let path = dir.path().join("bad.ply");
        fs::write(&path, "ply\nformat ascii 1.0\nelement vertex 2\nproperty double x\nproperty double y\nproperty double z\nend_header\n0 0 0\n").unwrap();
        assert!(load_cloud(&path).is_err());
    }

    #[test]
    fn label_count_mismatch_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ply");
        save_cloud(&sample_cloud(), &path, PlyFormat::BinaryLittleEndian).unwrap();
        fs::write(label_sidecar_path(&path), "0\n1\n").unwrap();
        assert!(load_cloud(&path).is_err());
    }

    #[test]
    fn colormap_endpoints_and_midpoint() {
        assert_eq!(score_color(0.0), (0, 0, 255));
        assert_eq!(score_color(1.0), (255, 0, 0));
        assert_eq!(score_color(0.5), (128, 0, 127));
    }

    #[test]
    fn colored_export_round_trips_through_loader() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.ply");
        let cloud = sample_cloud();
        export_colored(&cloud, &[0.0, 0.5, 1.0], &path).unwrap();
        // Our own reader skips the color properties.
        std::fs::remove_file(label_sidecar_path(&path)).ok();
        let loaded = load_cloud(&path).unwrap();
        assert_eq!(loaded.len(), 3);
    }

    proptest! {
        #[test]
        fn binary_round_trip_property(
            pts in proptest::collection::vec((-1e6f64..1e6, -1e6f64..1e6, -1e6f64..1e6), 1..40)
        ) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("p.ply");
            let cloud = PointCloud::new(
                pts.iter().map(|&(x, y, z)| Point3::new(x, y, z)).collect(),
                "t",
            ).unwrap();
            save_cloud(&cloud, &path, PlyFormat::BinaryLittleEndian).unwrap();
            let loaded = load_cloud(&path).unwrap();
            prop_assert_eq!(loaded.len(), cloud.len());
            for (a, b) in cloud.points.iter().zip(&loaded.points) {
                prop_assert_eq!(a.x.to_bits(), b.x.to_bits());
                prop_assert_eq!(a.y.to_bits(), b.y.to_bits());
                prop_assert_eq!(a.z.to_bits(), b.z.to_bits());
            }
        }
    }
}
