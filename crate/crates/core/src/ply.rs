//! PLY ingestion (ASCII and binary little-endian) and binary export.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::data::{quantize_u8, PointCloudFrame, Voxel};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Format {
    Ascii,
    BinaryLe,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => f64::from(b[0] as i8),
            Scalar::U8 => f64::from(b[0]),
            Scalar::I16 => f64::from(i16::from_le_bytes([b[0], b[1]])),
            Scalar::U16 => f64::from(u16::from_le_bytes([b[0], b[1]])),
            Scalar::I32 => f64::from(i32::from_le_bytes([b[0], b[1], b[2], b[3]])),
            Scalar::U32 => f64::from(u32::from_le_bytes([b[0], b[1], b[2], b[3]])),
            Scalar::F32 => f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])),
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().expect("8 bytes")),
        }
    }
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<(String, Scalar)>,
    has_list: bool,
}

impl Element {
    fn stride(&self) -> usize {
        self.properties.iter().map(|(_, t)| t.size()).sum()
    }
}

struct Header {
    format: Format,
    elements: Vec<Element>,
}

fn malformed(path: &Path, property: &str, reason: impl Into<String>) -> Error {
    Error::MalformedHeader {
        path: path.to_path_buf(),
        property: property.to_string(),
        reason: reason.into(),
    }
}

fn read_header(path: &Path, reader: &mut impl BufRead) -> Result<Header> {
    let mut line = String::new();
    let next_line = |reader: &mut dyn BufRead, line: &mut String| -> Result<bool> {
        line.clear();
        let n = reader.read_line(line).map_err(|e| Error::io(path, e))?;
        Ok(n > 0)
    };
    if !next_line(reader, &mut line)? || line.trim() != "ply" {
        return Err(malformed(path, "ply", "missing `ply` magic"));
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        if !next_line(reader, &mut line)? {
            return Err(malformed(path, "end_header", "header ended without `end_header`"));
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            [] => continue,
            ["comment", ..] | ["obj_info", ..] => continue,
            ["format", "ascii", _] => format = Some(Format::Ascii),
            ["format", "binary_little_endian", _] => format = Some(Format::BinaryLe),
            ["format", other, ..] => return Err(malformed(path, "format", format!("unsupported format `{other}`"))),
            ["element", name, count] => {
                let count = count
                    .parse()
                    .map_err(|_| malformed(path, name, format!("bad element count `{count}`")))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                    has_list: false,
                });
            }
            ["property", "list", _, _, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| malformed(path, name, "property before any element"))?;
                el.has_list = true;
            }
            ["property", ty, name] => {
                let scalar = Scalar::parse(ty).ok_or_else(|| malformed(path, name, format!("unknown type `{ty}`")))?;
                let el = elements
                    .last_mut()
                    .ok_or_else(|| malformed(path, name, "property before any element"))?;
                el.properties.push((name.to_string(), scalar));
            }
            ["end_header"] => break,
            [first, ..] => return Err(malformed(path, first, "unrecognised header line")),
        }
    }
    let format = format.ok_or_else(|| malformed(path, "format", "missing format line"))?;
    Ok(Header { format, elements })
}

/// Reads a voxelised point cloud. Geometry is rounded to integers; the
/// attribute is RGB when `red`, `green` and `blue` are all present,
/// otherwise the first non-geometry scalar property.
pub fn load_ply(path: impl AsRef<Path>) -> Result<PointCloudFrame> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let header = read_header(path, &mut reader)?;

    let vertex_pos = header
        .elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| malformed(path, "vertex", "no vertex element"))?;
    let vertex = &header.elements[vertex_pos];
    if vertex.has_list {
        return Err(malformed(path, "vertex", "list properties on vertices are not supported"));
    }
    let col = |name: &str| vertex.properties.iter().position(|(n, _)| n == name);
    let mut xyz = [0usize; 3];
    for (slot, name) in xyz.iter_mut().zip(["x", "y", "z"]) {
        *slot = col(name).ok_or_else(|| Error::MissingGeometryProperty {
            path: path.to_path_buf(),
            property: name.to_string(),
        })?;
    }
    let attr_cols: Vec<usize> = match (col("red"), col("green"), col("blue")) {
        (Some(r), Some(g), Some(b)) => vec![r, g, b],
        _ => {
            let skip = ["x", "y", "z", "nx", "ny", "nz", "red", "green", "blue", "alpha"];
            let scalar = vertex
                .properties
                .iter()
                .position(|(n, _)| !skip.contains(&n.as_str()))
                .ok_or_else(|| Error::MissingAttributeProperty { path: path.to_path_buf() })?;
            vec![scalar]
        }
    };

    let rows = match header.format {
        Format::Ascii => read_ascii_rows(path, &mut reader, &header.elements, vertex_pos)?,
        Format::BinaryLe => read_binary_rows(path, &mut reader, &header.elements, vertex_pos)?,
    };

    let mut geometry: Vec<Voxel> = Vec::with_capacity(rows.len());
    let mut attrs = Matrix::zeros(rows.len(), attr_cols.len());
    for (i, row) in rows.iter().enumerate() {
        geometry.push(xyz.map(|c| row[c].round() as i32));
        for (j, &c) in attr_cols.iter().enumerate() {
            attrs.set(i, j, row[c]);
        }
    }
    PointCloudFrame::new(geometry, attrs, 0)
}

fn read_ascii_rows(path: &Path, reader: &mut impl BufRead, elements: &[Element], vertex_pos: usize) -> Result<Vec<Vec<f64>>> {
    let body_err = |reason: String| Error::MalformedBody {
        path: path.to_path_buf(),
        reason,
    };
    let mut lines = reader.lines();
    let mut next = || -> Result<String> {
        loop {
            match lines.next() {
                Some(Ok(l)) if l.trim().is_empty() => continue,
                Some(Ok(l)) => return Ok(l),
                Some(Err(e)) => return Err(Error::io(path, e)),
                None => return Err(body_err("unexpected end of file".into())),
            }
        }
    };
    for el in &elements[..vertex_pos] {
        for _ in 0..el.count {
            next()?;
        }
    }
    let vertex = &elements[vertex_pos];
    let width = vertex.properties.len();
    let mut rows = Vec::with_capacity(vertex.count);
    for i in 0..vertex.count {
        let line = next()?;
        let values = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| body_err(format!("unparsable value on vertex {i}")))?;
        if values.len() < width {
            return Err(body_err(format!("vertex {i} has {} of {width} values", values.len())));
        }
        rows.push(values);
    }
    Ok(rows)
}

fn read_binary_rows(path: &Path, reader: &mut impl Read, elements: &[Element], vertex_pos: usize) -> Result<Vec<Vec<f64>>> {
    for el in &elements[..vertex_pos] {
        if el.has_list {
            return Err(malformed(path, &el.name, "list element before vertices"));
        }
        let mut skip = vec![0u8; el.stride() * el.count];
        reader.read_exact(&mut skip).map_err(|e| Error::io(path, e))?;
    }
    let vertex = &elements[vertex_pos];
    let stride = vertex.stride();
    let mut buf = vec![0u8; stride * vertex.count];
    reader.read_exact(&mut buf).map_err(|_| Error::MalformedBody {
        path: path.to_path_buf(),
        reason: format!("expected {} vertices of {stride} bytes", vertex.count),
    })?;
    let rows = buf
        .chunks_exact(stride.max(1))
        .take(vertex.count)
        .map(|chunk| {
            let mut offset = 0;
            vertex
                .properties
                .iter()
                .map(|(_, t)| {
                    let v = t.read_le(&chunk[offset..]);
                    offset += t.size();
                    v
                })
                .collect()
        })
        .collect();
    Ok(rows)
}

/// Writes binary little-endian PLY with `int` coordinates and `uchar`
/// attributes (RGB for three channels, `reflectance` for one). Attributes
/// are rounded half away from zero and clamped to `[0, 255]`.
pub fn save_ply(frame: &PointCloudFrame, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let unwritable = |source| Error::UnwritablePath {
        path: path.to_path_buf(),
        source,
    };
    let names: &[&str] = match frame.channels() {
        3 => &["red", "green", "blue"],
        1 => &["reflectance"],
        c => return Err(Error::WrongChannelCount { expected: 3, found: c }),
    };
    let file = File::create(path).map_err(unwritable)?;
    let mut w = BufWriter::new(file);
    let mut header = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty int x\nproperty int y\nproperty int z\n",
        frame.len()
    );
    for name in names {
        header.push_str(&format!("property uchar {name}\n"));
    }
    header.push_str("end_header\n");
    w.write_all(header.as_bytes()).map_err(unwritable)?;
    let attrs = frame.attributes();
    for (i, v) in frame.geometry().iter().enumerate() {
        for c in v {
            w.write_all(&c.to_le_bytes()).map_err(unwritable)?;
        }
        let bytes: Vec<u8> = attrs.row(i).iter().map(|&a| quantize_u8(a)).collect();
        w.write_all(&bytes).map_err(unwritable)?;
    }
    w.flush().map_err(unwritable)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    const ASCII_RGB: &str = "ply\nformat ascii 1.0\ncomment fixture\nelement vertex 4\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n0 0 0 255 0 0\n1 0 0 0 255 0\n0 1 0 0 0 255\n0 0 1.0 10 20 30\n";

    #[test]
    fn ascii_rgb_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let f = load_ply(write(dir.path(), "a.ply", ASCII_RGB)).unwrap();
        assert_eq!(f.len(), 4);
        assert_eq!(f.channels(), 3);
        assert_eq!(f.geometry()[3], [0, 0, 1]);
        assert_eq!(f.attributes().row(3), &[10.0, 20.0, 30.0]);
    }

    #[test]
    fn binary_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let f = load_ply(write(dir.path(), "a.ply", ASCII_RGB)).unwrap();
        let out = dir.path().join("b.ply");
        save_ply(&f, &out).unwrap();
        let g = load_ply(&out).unwrap();
        assert_eq!(f, g);
        save_ply(&g, &out).unwrap();
        assert_eq!(load_ply(&out).unwrap(), g);
    }

    #[test]
    fn export_rounds_and_clamps() {
        let dir = tempfile::tempdir().unwrap();
        let f = PointCloudFrame::new(
            vec![[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]],
            Matrix::column(&[255.4, -0.6, 2.5, 300.0]),
            0,
        )
        .unwrap();
        let out = dir.path().join("s.ply");
        save_ply(&f, &out).unwrap();
        let g = load_ply(&out).unwrap();
        assert_eq!(g.attributes().col(0), vec![255.0, 0.0, 3.0, 255.0]);
        assert_eq!(g.geometry(), f.geometry());
    }

    #[test]
    fn missing_color_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let body = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n";
        let err = load_ply(write(dir.path(), "n.ply", body)).unwrap_err();
        assert!(matches!(err, Error::MissingAttributeProperty { .. }), "{err}");
    }

    #[test]
    fn missing_geometry_names_the_property() {
        let dir = tempfile::tempdir().unwrap();
        let body = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float z\nproperty uchar red\nend_header\n0 0 0\n";
        match load_ply(write(dir.path(), "g.ply", body)).unwrap_err() {
            Error::MissingGeometryProperty { property, .. } => assert_eq!(property, "y"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn malformed_header_names_the_property() {
        let dir = tempfile::tempdir().unwrap();
        let body = "ply\nformat ascii 1.0\nelement vertex 1\nproperty quad x\nend_header\n";
        match load_ply(write(dir.path(), "h.ply", body)).unwrap_err() {
            Error::MalformedHeader { property, .. } => assert_eq!(property, "x"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn scalar_attribute_and_unwritable_path() {
        let dir = tempfile::tempdir().unwrap();
        let body = "ply\nformat ascii 1.0\nelement vertex 2\nproperty int x\nproperty int y\nproperty int z\nproperty float intensity\nend_header\n0 0 0 1.5\n1 1 1 7\n";
        let f = load_ply(write(dir.path(), "s.ply", body)).unwrap();
        assert_eq!(f.channels(), 1);
        assert_eq!(f.attributes().col(0), vec![1.5, 7.0]);
        let err = save_ply(&f, dir.path().join("missing/dir/x.ply")).unwrap_err();
        assert!(matches!(err, Error::UnwritablePath { .. }));
    }
}
