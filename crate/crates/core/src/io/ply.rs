//! PLY reading (ASCII and binary little-endian) and binary little-endian writing.
//!
//! Only the `vertex` element is materialized; other elements are parsed and
//! skipped. Vertex properties are exposed as `f64` columns.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScalarType {
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
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::I8 => "char",
            Self::U8 => "uchar",
            Self::I16 => "short",
            Self::U16 => "ushort",
            Self::I32 => "int",
            Self::U32 => "uint",
            Self::F32 => "float",
            Self::F64 => "double",
        }
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn decode(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }

    fn encode(self, v: f64, out: &mut Vec<u8>) {
        match self {
            Self::I8 => out.push(v.round().clamp(-128.0, 127.0) as i8 as u8),
            Self::U8 => out.push(v.round().clamp(0.0, 255.0) as u8),
            Self::I16 => out.extend((v.round() as i16).to_le_bytes()),
            Self::U16 => out.extend((v.round() as u16).to_le_bytes()),
            Self::I32 => out.extend((v.round() as i32).to_le_bytes()),
            Self::U32 => out.extend((v.round() as u32).to_le_bytes()),
            Self::F32 => out.extend((v as f32).to_le_bytes()),
            Self::F64 => out.extend(v.to_le_bytes()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum PropertyKind {
    Scalar(ScalarType),
    List { count: ScalarType, item: ScalarType },
}

#[derive(Clone, Debug)]
struct Property {
    name: String,
    kind: PropertyKind,
}

#[derive(Clone, Debug)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Format {
    Ascii,
    BinaryLittleEndian,
}

/// Vertex data of a PLY file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PlyVertices {
    pub count: usize,
    pub comments: Vec<String>,
    columns: Vec<(String, Vec<f64>)>,
    types: Vec<ScalarType>,
}

impl PlyVertices {
    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.columns.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }

    pub fn require(&self, name: &str, path: &Path) -> Result<&[f64]> {
        self.column(name)
            .ok_or_else(|| Error::parse(path, 0, format!("missing vertex property `{name}`")))
    }

    pub fn column_type(&self, name: &str) -> Option<ScalarType> {
        self.columns.iter().position(|(n, _)| n == name).map(|i| self.types[i])
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.columns.iter().map(|(n, _)| n.as_str())
    }
}

impl PlyVertices {
    fn set_layout(&mut self, element: &Element) {
        self.count = element.count;
        self.columns.clear();
        self.types.clear();
        for p in &element.properties {
            if let PropertyKind::Scalar(t) = p.kind {
                self.columns.push((p.name.clone(), Vec::with_capacity(element.count)));
                self.types.push(t);
            }
        }
    }
}

struct Header {
    format: Format,
    elements: Vec<Element>,
    comments: Vec<String>,
    lines: usize,
}

fn read_header(reader: &mut impl BufRead, path: &Path) -> Result<Header> {
    let mut line = String::new();
    let mut lineno = 0;
    let mut next = |line: &mut String| -> Result<usize> {
        line.clear();
        let n = reader.read_line(line)?;
        lineno += 1;
        if n == 0 {
            return Err(Error::parse(path, lineno, "unexpected end of header"));
        }
        Ok(lineno)
    };
    let ln = next(&mut line)?;
    if line.trim_end() != "ply" {
        return Err(Error::parse(path, ln, "missing `ply` magic"));
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    let mut comments = Vec::new();
    loop {
        let ln = next(&mut line)?;
        let mut words = line.split_whitespace();
        match words.next() {
            Some("format") => {
                format = Some(match (words.next(), words.next()) {
                    (Some("ascii"), Some("1.0")) => Format::Ascii,
                    (Some("binary_little_endian"), Some("1.0")) => Format::BinaryLittleEndian,
                    (Some(f), _) => return Err(Error::parse(path, ln, format!("unsupported format `{f}`"))),
                    _ => return Err(Error::parse(path, ln, "malformed format line")),
                });
            }
            Some("comment") | Some("obj_info") => {
                comments.push(line.trim_end().splitn(2, ' ').nth(1).unwrap_or("").to_string());
            }
            Some("element") => {
                let name = words.next().ok_or_else(|| Error::parse(path, ln, "element without name"))?;
                let count = words
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| Error::parse(path, ln, "element without a valid count"))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            Some("property") => {
                let element = elements
                    .last_mut()
                    .ok_or_else(|| Error::parse(path, ln, "property before any element"))?;
                let parts: Vec<&str> = words.collect();
                let bad_type = |t: &str| Error::parse(path, ln, format!("unknown property type `{t}`"));
                let property = match parts.as_slice() {
                    ["list", c, i, name] => Property {
                        name: name.to_string(),
                        kind: PropertyKind::List {
                            count: ScalarType::parse(c).ok_or_else(|| bad_type(c))?,
                            item: ScalarType::parse(i).ok_or_else(|| bad_type(i))?,
                        },
                    },
                    [t, name] => Property {
                        name: name.to_string(),
                        kind: PropertyKind::Scalar(ScalarType::parse(t).ok_or_else(|| bad_type(t))?),
                    },
                    _ => return Err(Error::parse(path, ln, "malformed property line")),
                };
                element.properties.push(property);
            }
            Some("end_header") => {
                let format = format.ok_or_else(|| Error::parse(path, ln, "header has no format line"))?;
                return Ok(Header {
                    format,
                    elements,
                    comments,
                    lines: ln,
                });
            }
            Some(other) => return Err(Error::parse(path, ln, format!("unexpected header keyword `{other}`"))),
            None => {}
        }
    }
}

fn read_binary(reader: &mut impl Read, header: &Header, path: &Path) -> Result<PlyVertices> {
    let mut out = PlyVertices {
        comments: header.comments.clone(),
        ..Default::default()
    };
    let truncated = |_| Error::parse(path, header.lines, "binary payload is truncated");
    for element in &header.elements {
        let is_vertex = element.name == "vertex";
        let scalar_only: Option<Vec<ScalarType>> = element
            .properties
            .iter()
            .map(|p| match p.kind {
                PropertyKind::Scalar(t) => Some(t),
                PropertyKind::List { .. } => None,
            })
            .collect();
        if is_vertex {
            out.set_layout(element);
        }
        if let Some(types) = scalar_only {
            let stride: usize = types.iter().map(|t| t.size()).sum();
            let mut buf = vec![0u8; stride];
            for _ in 0..element.count {
                reader.read_exact(&mut buf).map_err(truncated)?;
                if is_vertex {
                    let mut off = 0;
                    for (col, t) in types.iter().enumerate() {
                        out.columns[col].1.push(t.decode(&buf[off..off + t.size()]));
                        off += t.size();
                    }
                }
            }
            continue;
        }
        for _ in 0..element.count {
            let mut col = 0;
            for p in &element.properties {
                match p.kind {
                    PropertyKind::Scalar(t) => {
                        let mut b = [0u8; 8];
                        reader.read_exact(&mut b[..t.size()]).map_err(truncated)?;
                        if is_vertex {
                            out.columns[col].1.push(t.decode(&b));
                            col += 1;
                        }
                    }
                    PropertyKind::List { count, item } => {
                        let mut b = [0u8; 8];
                        reader.read_exact(&mut b[..count.size()]).map_err(truncated)?;
                        let n = count.decode(&b) as usize;
                        let mut skip = vec![0u8; n * item.size()];
                        reader.read_exact(&mut skip).map_err(truncated)?;
                    }
                }
            }
        }
    }
    Ok(out)
}

fn read_ascii(reader: &mut impl BufRead, header: &Header, path: &Path) -> Result<PlyVertices> {
    let mut out = PlyVertices {
        comments: header.comments.clone(),
        ..Default::default()
    };
    let mut lines = reader.lines().enumerate();
    for element in &header.elements {
        let is_vertex = element.name == "vertex";
        if is_vertex {
            out.set_layout(element);
        }
        for _ in 0..element.count {
            let (k, line) = lines
                .next()
                .ok_or_else(|| Error::parse(path, header.lines, format!("too few `{}` rows", element.name)))?;
            let ln = header.lines + k + 1;
            let line = line?;
            let mut tokens = line.split_whitespace();
            let mut take = || -> Result<f64> {
                tokens
                    .next()
                    .ok_or_else(|| Error::parse(path, ln, "row has too few values"))?
                    .parse::<f64>()
                    .map_err(|e| Error::parse(path, ln, e.to_string()))
            };
            let mut col = 0;
            for p in &element.properties {
                match p.kind {
                    PropertyKind::Scalar(_) => {
                        let v = take()?;
                        if is_vertex {
                            out.columns[col].1.push(v);
                            col += 1;
                        }
                    }
                    PropertyKind::List { .. } => {
                        let n = take()? as usize;
                        for _ in 0..n {
                            take()?;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn read_vertices(path: impl AsRef<Path>) -> Result<PlyVertices> {
    let path = path.as_ref();
    let mut reader = BufReader::new(File::open(path)?);
    let header = read_header(&mut reader, path)?;
    if !header.elements.iter().any(|e| e.name == "vertex") {
        return Err(Error::parse(path, header.lines, "no `vertex` element"));
    }
    match header.format {
        Format::Ascii => read_ascii(&mut reader, &header, path),
        Format::BinaryLittleEndian => read_binary(&mut reader, &header, path),
    }
}

/// A named, typed vertex column for writing.
pub struct Column<'a> {
    pub name: String,
    pub ty: ScalarType,
    pub values: &'a [f64],
}

impl<'a> Column<'a> {
    pub fn new(name: impl Into<String>, ty: ScalarType, values: &'a [f64]) -> Self {
        Self {
            name: name.into(),
            ty,
            values,
        }
    }
}

pub fn write_vertices(path: impl AsRef<Path>, comments: &[String], columns: &[Column<'_>]) -> Result<()> {
    let count = columns.first().map_or(0, |c| c.values.len());
    if let Some(c) = columns.iter().find(|c| c.values.len() != count) {
        return Err(Error::Shape(format!(
            "column `{}` has {} values, expected {count}",
            c.name,
            c.values.len()
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "ply")?;
    writeln!(w, "format binary_little_endian 1.0")?;
    for c in comments {
        writeln!(w, "comment {c}")?;
    }
    writeln!(w, "element vertex {count}")?;
    for c in columns {
        writeln!(w, "property {} {}", c.ty.name(), c.name)?;
    }
    writeln!(w, "end_header")?;
    let mut row = Vec::new();
    for i in 0..count {
        row.clear();
        for c in columns {
            c.ty.encode(c.values[i], &mut row);
        }
        w.write_all(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ascii_with_faces() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ply");
        std::fs::write(
            &path,
            "ply\nformat ascii 1.0\ncomment made by hand\nelement vertex 2\nproperty float x\nproperty uchar red\n\
             element face 1\nproperty list uchar int vertex_indices\nend_header\n1.5 10\n-2 255\n3 0 1 1\n",
        )
        .unwrap();
        let v = read_vertices(&path).unwrap();
        assert_eq!(v.count, 2);
        assert_eq!(v.column("x").unwrap(), &[1.5, -2.0]);
        assert_eq!(v.column("red").unwrap(), &[10.0, 255.0]);
        assert_eq!(v.comments, vec!["made by hand".to_string()]);
    }

    #[test]
    fn binary_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.ply");
        let xs = [0.25, -1.0, 3.5];
        let ids = [1.0, 200.0, 7.0];
        let ds = [0.1, 0.2, 0.3];
        write_vertices(
            &path,
            &[],
            &[
                Column::new("x", ScalarType::F32, &xs),
                Column::new("id", ScalarType::U8, &ids),
                Column::new("d", ScalarType::F64, &ds),
            ],
        )
        .unwrap();
        let v = read_vertices(&path).unwrap();
        assert_eq!(v.column("x").unwrap(), &xs);
        assert_eq!(v.column("id").unwrap(), &ids);
        assert_eq!(v.column("d").unwrap(), &ds);
    }

    #[test]
    fn malformed_files_report_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ply");
        std::fs::write(&path, "ply\nformat ascii 1.0\nelement vertex 1\nproperty quad x\nend_header\n").unwrap();
        let err = read_vertices(&path).unwrap_err().to_string();
        assert!(err.contains("line 4"), "{err}");
        std::fs::write(&path, "ply\nformat binary_little_endian 1.0\nelement vertex 2\nproperty float x\nend_header\nab").unwrap();
        assert!(read_vertices(&path).is_err());
        std::fs::write(&path, "off\n").unwrap();
        assert!(read_vertices(&path).is_err());
    }
}
