use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{TriangleMesh, Vec2, Vec3};

/// Reads `.obj` or `.ply` depending on the extension.
pub fn read_mesh(path: impl AsRef<Path>) -> Result<TriangleMesh> {
    let path = path.as_ref();
    match extension(path).as_str() {
        "obj" => read_obj(path),
        "ply" => read_ply(path),
        other => Err(Error::Format(format!("unsupported mesh extension '{other}'"))),
    }
}

/// Writes `.obj` or `.ply` depending on the extension.
pub fn write_mesh(path: impl AsRef<Path>, mesh: &TriangleMesh) -> Result<()> {
    let path = path.as_ref();
    match extension(path).as_str() {
        "obj" => write_obj(path, mesh, None),
        "ply" => write_ply(path, mesh),
        other => Err(Error::Format(format!("unsupported mesh extension '{other}'"))),
    }
}

fn extension(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase()
}

/// Wavefront OBJ reader: `v` (with optional trailing RGB), `vn` and `f`
/// records; polygons are fan-triangulated and texture indices ignored.
pub fn read_obj(path: impl AsRef<Path>) -> Result<TriangleMesh> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut vertices = Vec::new();
    let mut colors = Vec::new();
    let mut normals = Vec::new();
    let mut triangles = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let mut it = line.split_whitespace();
        let bad = |what: &str| Error::Format(format!("{}:{}: {what}", path.display(), lineno + 1));
        match it.next() {
            Some("v") => {
                let nums: Vec<f64> = it
                    .map(|t| t.parse::<f64>().map_err(|_| bad("bad vertex")))
                    .collect::<Result<_>>()?;
                if nums.len() < 3 {
                    return Err(bad("vertex needs three coordinates"));
                }
                vertices.push(Vec3::new(nums[0], nums[1], nums[2]));
                if nums.len() >= 6 {
                    colors.push(Vec3::new(nums[3], nums[4], nums[5]));
                }
            }
            Some("vn") => {
                let nums: Vec<f64> = it
                    .map(|t| t.parse::<f64>().map_err(|_| bad("bad normal")))
                    .collect::<Result<_>>()?;
                if nums.len() < 3 {
                    return Err(bad("normal needs three components"));
                }
                normals.push(Vec3::new(nums[0], nums[1], nums[2]));
            }
            Some("f") => {
                let n = vertices.len() as i64;
                let idx: Vec<u32> = it
                    .map(|t| {
                        let first = t.split('/').next().unwrap_or("");
                        let i: i64 = first.parse().map_err(|_| bad("bad face index"))?;
                        let i = if i < 0 { n + i } else { i - 1 };
                        if i < 0 || i >= n {
                            return Err(bad("face index out of range"));
                        }
                        Ok(i as u32)
                    })
                    .collect::<Result<_>>()?;
                if idx.len() < 3 {
                    return Err(bad("face needs three vertices"));
                }
                for k in 1..idx.len() - 1 {
                    triangles.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    let mut mesh = TriangleMesh::new(vertices, triangles);
    if !colors.is_empty() && colors.len() == mesh.vertices.len() {
        mesh.colors = Some(colors);
    }
    if !normals.is_empty() && normals.len() == mesh.vertices.len() {
        mesh.normals = Some(normals);
    }
    Ok(mesh)
}

/// Wavefront OBJ writer. With `uvs` (one per vertex) emits `vt` records and
/// `f a/a b/b c/c`; `material` adds `mtllib`/`usemtl` lines naming
/// `<material>.mtl`.
pub fn write_obj(path: impl AsRef<Path>, mesh: &TriangleMesh, uvs: Option<(&[Vec2], &str)>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    if let Some((_, material)) = uvs {
        writeln!(w, "mtllib {material}.mtl").map_err(io)?;
        writeln!(w, "usemtl {material}").map_err(io)?;
    }
    for (i, v) in mesh.vertices.iter().enumerate() {
        match &mesh.colors {
            Some(c) => writeln!(w, "v {} {} {} {} {} {}", v.x, v.y, v.z, c[i].x, c[i].y, c[i].z),
            None => writeln!(w, "v {} {} {}", v.x, v.y, v.z),
        }
        .map_err(io)?;
    }
    if let Some(ns) = &mesh.normals {
        for n in ns {
            writeln!(w, "vn {} {} {}", n.x, n.y, n.z).map_err(io)?;
        }
    }
    if let Some((uv, _)) = uvs {
        for t in uv {
            writeln!(w, "vt {} {}", t.x, t.y).map_err(io)?;
        }
    }
    for t in &mesh.triangles {
        let [a, b, c] = t.map(|i| i + 1);
        if uvs.is_some() {
            writeln!(w, "f {a}/{a} {b}/{b} {c}/{c}")
        } else {
            writeln!(w, "f {a} {b} {c}")
        }
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Binary little-endian PLY writer: float xyz, optional uchar RGB, int faces.
pub fn write_ply(path: impl AsRef<Path>, mesh: &TriangleMesh) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    let mut header = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\n",
        mesh.vertices.len()
    );
    if mesh.colors.is_some() {
        header.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    header.push_str(&format!(
        "element face {}\nproperty list uchar int vertex_indices\nend_header\n",
        mesh.triangles.len()
    ));
    w.write_all(header.as_bytes()).map_err(io)?;
    for (i, v) in mesh.vertices.iter().enumerate() {
        for k in 0..3 {
            w.write_all(&(v[k] as f32).to_le_bytes()).map_err(io)?;
        }
        if let Some(c) = &mesh.colors {
            let rgb = [0, 1, 2].map(|k| (c[i][k].clamp(0.0, 1.0) * 255.0).round() as u8);
            w.write_all(&rgb).map_err(io)?;
        }
    }
    for t in &mesh.triangles {
        w.write_all(&[3u8]).map_err(io)?;
        for &i in t {
            w.write_all(&(i as i32).to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

#[derive(Clone, Copy)]
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

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

enum Property {
    Scalar(String, Scalar),
    List(String, Scalar, Scalar),
}

struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

/// PLY reader for `binary_little_endian` and `ascii` files with a vertex
/// element (x, y, z, optional red/green/blue) and a face index list.
pub fn read_ply(path: impl AsRef<Path>) -> Result<TriangleMesh> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Format(format!("{}: {m}", path.display()));
    let end = find(&bytes, b"end_header\n").ok_or_else(|| bad("missing end_header"))?;
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("header is not UTF-8"))?;
    let body = &bytes[end + b"end_header\n".len()..];
    let mut lines = header.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(bad("missing ply magic"));
    }
    let mut binary = None;
    let mut elements: Vec<Element> = Vec::new();
    for line in lines {
        let t: Vec<&str> = line.split_whitespace().collect();
        match t.as_slice() {
            ["format", "binary_little_endian", _] => binary = Some(true),
            ["format", "ascii", _] => binary = Some(false),
            ["format", f, _] => return Err(bad(&format!("unsupported format {f}"))),
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count.parse().map_err(|_| bad("bad element count"))?,
                props: Vec::new(),
            }),
            ["property", "list", c, i, name] => {
                let el = elements.last_mut().ok_or_else(|| bad("property before element"))?;
                let c = Scalar::parse(c).ok_or_else(|| bad("bad list count type"))?;
                let i = Scalar::parse(i).ok_or_else(|| bad("bad list item type"))?;
                el.props.push(Property::List(name.to_string(), c, i));
            }
            ["property", ty, name] => {
                let el = elements.last_mut().ok_or_else(|| bad("property before element"))?;
                let ty = Scalar::parse(ty).ok_or_else(|| bad("bad property type"))?;
                el.props.push(Property::Scalar(name.to_string(), ty));
            }
            _ => {}
        }
    }
    let binary = binary.ok_or_else(|| bad("missing format line"))?;

    let mut vertices = Vec::new();
    let mut colors = Vec::new();
    let mut triangles = Vec::new();
    let mut cursor = 0usize;
    let text = if binary {
        None
    } else {
        Some(std::str::from_utf8(body).map_err(|_| bad("ascii body is not UTF-8"))?)
    };
    let mut tokens = text.map(|t| t.split_whitespace());
    let mut next = |ty: Scalar| -> Result<f64> {
        match tokens.as_mut() {
            Some(tok) => tok
                .next()
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| bad("truncated ascii body")),
            None => {
                let n = ty.size();
                if cursor + n > body.len() {
                    return Err(bad("truncated binary body"));
                }
                let v = ty.read(&body[cursor..cursor + n]);
                cursor += n;
                Ok(v)
            }
        }
    };
    for el in &elements {
        for _ in 0..el.count {
            let mut xyz = [0.0; 3];
            let mut rgb = [None; 3];
            for p in &el.props {
                match p {
                    Property::Scalar(name, ty) => {
                        let v = next(*ty)?;
                        match name.as_str() {
                            "x" => xyz[0] = v,
                            "y" => xyz[1] = v,
                            "z" => xyz[2] = v,
                            "red" => rgb[0] = Some(v / 255.0),
                            "green" => rgb[1] = Some(v / 255.0),
                            "blue" => rgb[2] = Some(v / 255.0),
                            _ => {}
                        }
                    }
                    Property::List(name, cty, ity) => {
                        let n = next(*cty)? as usize;
                        let mut idx = Vec::with_capacity(n);
                        for _ in 0..n {
                            idx.push(next(*ity)? as u32);
                        }
                        if el.name == "face" && (name == "vertex_indices" || name == "vertex_index") {
                            for k in 1..n.saturating_sub(1) {
                                triangles.push([idx[0], idx[k], idx[k + 1]]);
                            }
                        }
                    }
                }
            }
            if el.name == "vertex" {
                vertices.push(Vec3::from(xyz));
                if let [Some(r), Some(g), Some(b)] = rgb {
                    colors.push(Vec3::new(r, g, b));
                }
            }
        }
    }
    let n = vertices.len() as u32;
    if triangles.iter().flatten().any(|&i| i >= n) {
        return Err(bad("face index out of range"));
    }
    let mut mesh = TriangleMesh::new(vertices, triangles);
    if colors.len() == mesh.vertices.len() && !colors.is_empty() {
        mesh.colors = Some(colors);
    }
    Ok(mesh)
}

fn find(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    haystack.windows(needle.len()).position(|w| w == needle)
}

/// Reads a whole file, mapping failures to [`Error::Io`].
pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(buf)
}
