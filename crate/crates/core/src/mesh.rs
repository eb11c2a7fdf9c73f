//! Triangle meshes and point clouds with PLY and OBJ I/O.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};
use nalgebra::{Point3, Vector3};
use thiserror::Error;

use crate::geometry::SceneBounds;

#[derive(Debug, Error)]
pub enum MeshIoError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("PLY header: {0}")]
    Header(String),
    #[error("PLY body: {0}")]
    Body(String),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Point3<f64>>,
    pub triangles: Vec<[u32; 3]>,
    pub normals: Option<Vec<Vector3<f64>>>,
}

impl Mesh {
    pub fn new(vertices: Vec<Point3<f64>>, triangles: Vec<[u32; 3]>) -> Self {
        Self {
            vertices,
            triangles,
            normals: None,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle(&self, t: usize) -> [Point3<f64>; 3] {
        let [a, b, c] = self.triangles[t];
        [
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        ]
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangle(t);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    pub fn bounds(&self) -> SceneBounds {
        SceneBounds::from_points(self.vertices.iter())
    }

    /// Area-weighted vertex normals, normalized; isolated vertices get zero.
    pub fn compute_vertex_normals(&mut self) {
        let mut acc = vec![Vector3::zeros(); self.vertices.len()];
        for t in 0..self.triangles.len() {
            let [a, b, c] = self.triangle(t);
            let n = (b - a).cross(&(c - a));
            for &i in &self.triangles[t] {
                acc[i as usize] += n;
            }
        }
        for n in &mut acc {
            let len = n.norm();
            if len > 0.0 {
                *n /= len;
            }
        }
        self.normals = Some(acc);
    }

    /// Drops triangles with repeated indices or zero area, then unused
    /// vertices, keeping first-use vertex order.
    pub fn remove_degenerate(&mut self) {
        let verts = &self.vertices;
        self.triangles.retain(|&[a, b, c]| {
            if a == b || b == c || a == c {
                return false;
            }
            let (pa, pb, pc) = (verts[a as usize], verts[b as usize], verts[c as usize]);
            (pb - pa).cross(&(pc - pa)).norm_squared() > 0.0
        });
        self.compact();
    }

    /// Renumbers vertices in order of first use by the triangle list.
    pub fn compact(&mut self) {
        let mut remap = vec![u32::MAX; self.vertices.len()];
        let mut vertices = Vec::new();
        let mut normals = self.normals.as_ref().map(|_| Vec::new());
        for tri in &mut self.triangles {
            for i in tri.iter_mut() {
                let old = *i as usize;
                if remap[old] == u32::MAX {
                    remap[old] = vertices.len() as u32;
                    vertices.push(self.vertices[old]);
                    if let (Some(out), Some(src)) = (normals.as_mut(), self.normals.as_ref()) {
                        out.push(src[old]);
                    }
                }
                *i = remap[old];
            }
        }
        self.vertices = vertices;
        self.normals = normals;
    }

    /// Appends `other`, offsetting its indices.
    pub fn append(&mut self, other: &Mesh) {
        let off = self.vertices.len() as u32;
        self.vertices.extend_from_slice(&other.vertices);
        self.triangles
            .extend(other.triangles.iter().map(|t| [t[0] + off, t[1] + off, t[2] + off]));
        self.normals = None;
    }

    /// Edges used by exactly one triangle, as sorted index pairs.
    pub fn boundary_edges(&self) -> Vec<[u32; 2]> {
        let mut count: HashMap<[u32; 2], u32> = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *count.entry([a.min(b), a.max(b)]).or_insert(0) += 1;
            }
        }
        let mut out: Vec<[u32; 2]> = count
            .into_iter()
            .filter(|(_, c)| *c == 1)
            .map(|(e, _)| e)
            .collect();
        out.sort_unstable();
        out
    }

    pub fn to_ply(&self) -> Vec<u8> {
        let mut header = String::from("ply\nformat binary_little_endian 1.0\n");
        let _ = writeln!(header, "element vertex {}", self.vertices.len());
        header.push_str("property float x\nproperty float y\nproperty float z\n");
        if self.normals.is_some() {
            header.push_str("property float nx\nproperty float ny\nproperty float nz\n");
        }
        let _ = writeln!(header, "element face {}", self.triangles.len());
        header.push_str("property list uchar uint vertex_indices\nend_header\n");
        let mut out = header.into_bytes();
        for (i, v) in self.vertices.iter().enumerate() {
            for c in [v.x, v.y, v.z] {
                out.write_f32::<LittleEndian>(c as f32).unwrap();
            }
            if let Some(n) = &self.normals {
                for c in [n[i].x, n[i].y, n[i].z] {
                    out.write_f32::<LittleEndian>(c as f32).unwrap();
                }
            }
        }
        for t in &self.triangles {
            out.push(3);
            for &i in t {
                out.write_u32::<LittleEndian>(i).unwrap();
            }
        }
        out
    }

    pub fn to_obj(&self) -> String {
        let mut s = String::new();
        for v in &self.vertices {
            let _ = writeln!(s, "v {} {} {}", v.x, v.y, v.z);
        }
        if let Some(ns) = &self.normals {
            for n in ns {
                let _ = writeln!(s, "vn {} {} {}", n.x, n.y, n.z);
            }
        }
        let with_normals = self.normals.is_some();
        for t in &self.triangles {
            let [a, b, c] = t.map(|i| i + 1);
            if with_normals {
                let _ = writeln!(s, "f {a}//{a} {b}//{b} {c}//{c}");
            } else {
                let _ = writeln!(s, "f {a} {b} {c}");
            }
        }
        s
    }

    pub fn write_ply(&self, path: &Path) -> Result<(), MeshIoError> {
        write_file(path, &self.to_ply())
    }

    pub fn write_obj(&self, path: &Path) -> Result<(), MeshIoError> {
        write_file(path, self.to_obj().as_bytes())
    }

    /// Reads vertices and faces (polygons are fan-triangulated). Point clouds
    /// come back with no triangles.
    pub fn read_ply(path: &Path) -> Result<Mesh, MeshIoError> {
        let bytes = fs::read(path).map_err(|source| MeshIoError::Io {
            path: path.display().to_string(),
            source,
        })?;
        parse_ply(&bytes)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), MeshIoError> {
    fs::write(path, bytes).map_err(|source| MeshIoError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Binary little-endian PLY with float32 positions and no faces.
pub fn point_cloud_to_ply(points: &[Point3<f64>]) -> Vec<u8> {
    Mesh::new(points.to_vec(), vec![]).to_ply()
}

#[derive(Debug, Clone, Copy, PartialEq)]
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

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => LittleEndian::read_i16(b) as f64,
            Self::U16 => LittleEndian::read_u16(b) as f64,
            Self::I32 => LittleEndian::read_i32(b) as f64,
            Self::U32 => LittleEndian::read_u32(b) as f64,
            Self::F32 => LittleEndian::read_f32(b) as f64,
            Self::F64 => LittleEndian::read_f64(b),
        }
    }
}

#[derive(Debug, Clone)]
enum Property {
    Scalar(String, Scalar),
    List(String, Scalar, Scalar),
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

/// Source of property values for either encoding.
trait ValueSource {
    fn scalar(&mut self, ty: Scalar) -> Result<f64, MeshIoError>;
}

struct BinarySource<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl ValueSource for BinarySource<'_> {
    fn scalar(&mut self, ty: Scalar) -> Result<f64, MeshIoError> {
        let n = ty.size();
        if self.pos + n > self.bytes.len() {
            return Err(MeshIoError::Body("unexpected end of data".into()));
        }
        let v = ty.read(&self.bytes[self.pos..self.pos + n]);
        self.pos += n;
        Ok(v)
    }
}

struct AsciiSource<'a> {
    tokens: std::str::SplitAsciiWhitespace<'a>,
}

impl ValueSource for AsciiSource<'_> {
    fn scalar(&mut self, _ty: Scalar) -> Result<f64, MeshIoError> {
        let t = self
            .tokens
            .next()
            .ok_or_else(|| MeshIoError::Body("unexpected end of data".into()))?;
        t.parse()
            .map_err(|_| MeshIoError::Body(format!("invalid number '{t}'")))
    }
}

pub fn parse_ply(bytes: &[u8]) -> Result<Mesh, MeshIoError> {
    let end = find_subslice(bytes, b"end_header")
        .ok_or_else(|| MeshIoError::Header("missing end_header".into()))?;
    let header = std::str::from_utf8(&bytes[..end])
        .map_err(|_| MeshIoError::Header("header is not UTF-8".into()))?;
    let mut body_start = end + b"end_header".len();
    if bytes.get(body_start) == Some(&b'\r') {
        body_start += 1;
    }
    if bytes.get(body_start) == Some(&b'\n') {
        body_start += 1;
    }

    let mut lines = header.lines().map(str::trim);
    if lines.next() != Some("ply") {
        return Err(MeshIoError::Header("missing 'ply' magic".into()));
    }
    let mut ascii = None;
    let mut elements: Vec<Element> = Vec::new();
    for line in lines {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["format", "ascii", _] => ascii = Some(true),
            ["format", "binary_little_endian", _] => ascii = Some(false),
            ["format", other, _] => {
                return Err(MeshIoError::Header(format!("unsupported format '{other}'")))
            }
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count
                    .parse()
                    .map_err(|_| MeshIoError::Header(format!("bad element count '{count}'")))?,
                props: vec![],
            }),
            ["property", "list", cnt, item, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| MeshIoError::Header("property before element".into()))?;
                let (c, i) = (Scalar::parse(cnt), Scalar::parse(item));
                match (c, i) {
                    (Some(c), Some(i)) => el.props.push(Property::List(name.to_string(), c, i)),
                    _ => return Err(MeshIoError::Header(format!("bad list property '{line}'"))),
                }
            }
            ["property", ty, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| MeshIoError::Header("property before element".into()))?;
                let ty = Scalar::parse(ty)
                    .ok_or_else(|| MeshIoError::Header(format!("bad property type '{ty}'")))?;
                el.props.push(Property::Scalar(name.to_string(), ty));
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            _ => return Err(MeshIoError::Header(format!("unrecognized line '{line}'"))),
        }
    }
    let ascii = ascii.ok_or_else(|| MeshIoError::Header("missing format line".into()))?;
    let body = &bytes[body_start..];
    let text;
    let mut src: Box<dyn ValueSource> = if ascii {
        text = String::from_utf8_lossy(body);
        Box::new(AsciiSource {
            tokens: text.split_ascii_whitespace(),
        })
    } else {
        Box::new(BinarySource { bytes: body, pos: 0 })
    };

    let mut mesh = Mesh::default();
    let mut normals = Vec::new();
    for el in &elements {
        for _ in 0..el.count {
            let mut xyz = [0.0; 3];
            let mut n = [0.0; 3];
            let mut has_n = false;
            for p in &el.props {
                match p {
                    Property::Scalar(name, ty) => {
                        let v = src.scalar(*ty)?;
                        match name.as_str() {
                            "x" => xyz[0] = v,
                            "y" => xyz[1] = v,
                            "z" => xyz[2] = v,
                            "nx" => (n[0], has_n) = (v, true),
                            "ny" => n[1] = v,
                            "nz" => n[2] = v,
                            _ => {}
                        }
                    }
                    Property::List(name, cnt, item) => {
                        let k = src.scalar(*cnt)? as usize;
                        let mut idx = Vec::with_capacity(k);
                        for _ in 0..k {
                            idx.push(src.scalar(*item)? as u32);
                        }
                        if el.name == "face" && (name == "vertex_indices" || name == "vertex_index") {
                            for j in 1..idx.len().saturating_sub(1) {
                                mesh.triangles.push([idx[0], idx[j], idx[j + 1]]);
                            }
                        }
                    }
                }
            }
            if el.name == "vertex" {
                mesh.vertices.push(Point3::from(xyz));
                if has_n {
                    normals.push(Vector3::from(n));
                }
            }
        }
    }
    let nv = mesh.vertices.len() as u32;
    if mesh.triangles.iter().flatten().any(|&i| i >= nv) {
        return Err(MeshIoError::Body("face index out of range".into()));
    }
    if !normals.is_empty() && normals.len() == mesh.vertices.len() {
        mesh.normals = Some(normals);
    }
    Ok(mesh)
}

fn find_subslice(hay: &[u8], needle: &[u8]) -> Option<usize> {
    hay.windows(needle.len()).position(|w| w == needle)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square() -> Mesh {
        Mesh::new(
            vec![
                Point3::new(0.0, 0.0, 0.0),
                Point3::new(1.0, 0.0, 0.0),
                Point3::new(1.0, 1.0, 0.0),
                Point3::new(0.0, 1.0, 0.0),
            ],
            vec![[0, 1, 2], [0, 2, 3]],
        )
    }

    #[test]
    fn ply_round_trip() {
        let mut m = square();
        m.compute_vertex_normals();
        let back = parse_ply(&m.to_ply()).unwrap();
        assert_eq!(back.triangles, m.triangles);
        assert_eq!(back.vertices, m.vertices);
        assert_eq!(back.normals.unwrap()[0], Vector3::z());
    }

    #[test]
    fn ascii_ply_with_quads() {
        let text = "ply\nformat ascii 1.0\nelement vertex 4\nproperty double x\nproperty double y\nproperty double z\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n";
        let m = parse_ply(text.as_bytes()).unwrap();
        assert_eq!(m.triangles, vec![[0, 1, 2], [0, 2, 3]]);
    }

    #[test]
    fn out_of_range_face_is_rejected() {
        let mut m = square();
        m.triangles.push([0, 1, 9]);
        assert!(matches!(parse_ply(&m.to_ply()), Err(MeshIoError::Body(_))));
    }

    #[test]
    fn degenerate_cleanup_and_compaction() {
        let mut m = square();
        m.vertices.push(Point3::new(2.0, 0.0, 0.0));
        m.triangles.push([1, 1, 2]);
        m.triangles.push([0, 1, 4]); // collinear
        m.remove_degenerate();
        assert_eq!(m.triangles.len(), 2);
        assert_eq!(m.vertices.len(), 4);
        assert!((m.surface_area() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn obj_output_is_one_based() {
        let obj = square().to_obj();
        assert!(obj.contains("f 1 2 3"));
        assert_eq!(obj.lines().filter(|l| l.starts_with("v ")).count(), 4);
    }

    #[test]
    fn boundary_of_square() {
        assert_eq!(square().boundary_edges().len(), 4);
    }
}
