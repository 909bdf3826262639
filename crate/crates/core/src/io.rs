//! Mesh files (ASCII OBJ, binary little-endian PLY), label sidecars and the
//! tensor container.
//!
//! Tensor container layout: one UTF-8 JSON header line
//! `{"dtype":"f32","shape":[...],"order":"row-major","endian":"little"}`,
//! a `\n`, then the raw little-endian `f32` payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::mesh::{Jaw, LabeledMesh, Vec3, MAX_FACES};

/// Label sidecar stored next to a mesh file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub jaw: Jaw,
    pub face_labels: Vec<i64>,
    pub face_instance_ids: Vec<i64>,
}

impl Sidecar {
    pub fn from_mesh(mesh: &LabeledMesh) -> Self {
        Self {
            jaw: mesh.jaw(),
            face_labels: mesh.face_labels().iter().map(|&l| l as i64).collect(),
            face_instance_ids: mesh.face_instance_ids().iter().map(|&i| i as i64).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshFormat {
    Obj,
    Ply,
}

impl MeshFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref()
        {
            Some("obj") => Ok(MeshFormat::Obj),
            Some("ply") => Ok(MeshFormat::Ply),
            _ => Err(Error::Parse {
                path: path.to_path_buf(),
                line: 0,
                message: "unsupported mesh extension (expected .obj or .ply)".into(),
            }),
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            MeshFormat::Obj => "obj",
            MeshFormat::Ply => "ply",
        }
    }
}

/// Raw geometry before labels are attached.
#[derive(Debug, Clone, PartialEq)]
pub struct RawMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
}

pub fn load_mesh(path: &Path, sidecar: &Path) -> Result<LabeledMesh> {
    let raw = read_raw_mesh(path)?;
    if raw.faces.len() > MAX_FACES {
        return Err(Error::TooManyFaces {
            faces: raw.faces.len(),
            limit: MAX_FACES,
        });
    }
    let side = read_sidecar(sidecar)?;
    attach_labels(raw, side)
}

pub fn attach_labels(raw: RawMesh, side: Sidecar) -> Result<LabeledMesh> {
    let labels = side
        .face_labels
        .iter()
        .map(|&l| u8::try_from(l).map_err(|_| Error::InvalidLabel(l)))
        .collect::<Result<Vec<_>>>()?;
    let instances = side
        .face_instance_ids
        .iter()
        .map(|&i| {
            i32::try_from(i)
                .map_err(|_| Error::schema("sidecar", format!("instance id {i} out of range")))
        })
        .collect::<Result<Vec<_>>>()?;
    LabeledMesh::new(raw.vertices, raw.faces, labels, instances, side.jaw)
}

pub fn read_sidecar(path: &Path) -> Result<Sidecar> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

pub fn write_sidecar(path: &Path, mesh: &LabeledMesh) -> Result<()> {
    let text = serde_json::to_string(&Sidecar::from_mesh(mesh))
        .map_err(|e| Error::schema("sidecar", e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_raw_mesh(path: &Path) -> Result<RawMesh> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    match MeshFormat::from_path(path)? {
        MeshFormat::Obj => parse_obj(path, &bytes),
        MeshFormat::Ply => parse_ply(path, &bytes),
    }
}

/// Writes geometry in the format implied by the extension, plus the sidecar.
pub fn save_mesh(path: &Path, sidecar: &Path, mesh: &LabeledMesh) -> Result<()> {
    let bytes = match MeshFormat::from_path(path)? {
        MeshFormat::Obj => encode_obj(mesh),
        MeshFormat::Ply => encode_ply(mesh),
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    write_sidecar(sidecar, mesh)
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn parse_obj(path: &Path, bytes: &[u8]) -> Result<RawMesh> {
    let text = std::str::from_utf8(bytes).map_err(|e| parse_err(path, 0, e.to_string()))?;
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.split('#').next().unwrap_or("").trim();
        let mut tokens = line.split_whitespace();
        match tokens.next() {
            Some("v") => {
                let coords: Vec<f64> = tokens
                    .take(3)
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| parse_err(path, lineno, format!("bad vertex coordinate: {e}")))?;
                if coords.len() != 3 {
                    return Err(parse_err(path, lineno, "vertex needs three coordinates"));
                }
                vertices.push([coords[0], coords[1], coords[2]]);
            }
            Some("f") => {
                let idx: Vec<usize> = tokens
                    .map(|t| {
                        let head = t.split('/').next().unwrap_or("");
                        match head.parse::<usize>() {
                            Ok(i) if i >= 1 => Ok(i - 1),
                            _ => Err(parse_err(path, lineno, format!("bad face index '{t}'"))),
                        }
                    })
                    .collect::<Result<_>>()?;
                if idx.len() != 3 {
                    return Err(parse_err(
                        path,
                        lineno,
                        format!("only triangles are supported, got {} indices", idx.len()),
                    ));
                }
                faces.push([idx[0], idx[1], idx[2]]);
            }
            // normals, texture coordinates, groups and materials are ignored
            _ => {}
        }
    }
    Ok(RawMesh { vertices, faces })
}

pub fn encode_obj(mesh: &LabeledMesh) -> Vec<u8> {
    let mut out = String::with_capacity(mesh.vertices().len() * 32 + mesh.num_faces() * 24);
    for v in mesh.vertices() {
        // f32 Display is the shortest round-tripping representation
        out.push_str(&format!(
            "v {} {} {}\n",
            v[0] as f32, v[1] as f32, v[2] as f32
        ));
    }
    for f in mesh.faces() {
        out.push_str(&format!("f {} {} {}\n", f[0] + 1, f[1] + 1, f[2] + 1));
    }
    out.into_bytes()
}

pub fn encode_ply(mesh: &LabeledMesh) -> Vec<u8> {
    let mut out = Vec::new();
    let header = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nelement face {}\nproperty list uchar int vertex_indices\nend_header\n",
        mesh.vertices().len(),
        mesh.num_faces()
    );
    out.extend_from_slice(header.as_bytes());
    for v in mesh.vertices() {
        for c in v {
            out.extend_from_slice(&(*c as f32).to_le_bytes());
        }
    }
    for f in mesh.faces() {
        out.push(3u8);
        for &i in f {
            out.extend_from_slice(&(i as i32).to_le_bytes());
        }
    }
    out
}

fn parse_ply(path: &Path, bytes: &[u8]) -> Result<RawMesh> {
    const END: &[u8] = b"end_header\n";
    let end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| parse_err(path, 0, "missing end_header"))?;
    let header =
        std::str::from_utf8(&bytes[..end]).map_err(|e| parse_err(path, 0, e.to_string()))?;
    let mut lines = header.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));

    match lines.next() {
        Some((_, "ply")) => {}
        _ => return Err(parse_err(path, 1, "missing 'ply' magic")),
    }
    let mut n_vertices = None;
    let mut n_faces = None;
    let mut vertex_props = Vec::new();
    let mut face_prop_ok = false;
    let mut current = "";
    for (lineno, line) in lines {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            ["format", "binary_little_endian", "1.0"] => {}
            ["format", other, ..] => {
                return Err(parse_err(
                    path,
                    lineno,
                    format!("unsupported PLY format '{other}'"),
                ))
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", "vertex", n] => {
                n_vertices = Some(
                    n.parse::<usize>()
                        .map_err(|e| parse_err(path, lineno, e.to_string()))?,
                );
                current = "vertex";
            }
            ["element", "face", n] => {
                n_faces = Some(
                    n.parse::<usize>()
                        .map_err(|e| parse_err(path, lineno, e.to_string()))?,
                );
                current = "face";
            }
            ["element", other, ..] => {
                return Err(parse_err(
                    path,
                    lineno,
                    format!("unsupported element '{other}'"),
                ))
            }
            ["property", "float", name] | ["property", "float32", name] if current == "vertex" => {
                vertex_props.push(name.to_string());
            }
            ["property", "list", "uchar" | "uint8", "int" | "int32", _] if current == "face" => {
                face_prop_ok = true;
            }
            _ => {
                return Err(parse_err(
                    path,
                    lineno,
                    format!("unsupported header line '{line}'"),
                ))
            }
        }
    }
    if vertex_props != ["x", "y", "z"] {
        return Err(parse_err(path, 0, "vertex element must be float x, y, z"));
    }
    let n_vertices = n_vertices.ok_or_else(|| parse_err(path, 0, "missing vertex element"))?;
    let n_faces = n_faces.ok_or_else(|| parse_err(path, 0, "missing face element"))?;
    if n_faces > 0 && !face_prop_ok {
        return Err(parse_err(path, 0, "face element must be 'list uchar int'"));
    }

    let mut body = &bytes[end + END.len()..];
    let mut take = |n: usize| -> Result<&[u8]> {
        if body.len() < n {
            return Err(parse_err(path, 0, "truncated PLY payload"));
        }
        let (head, tail) = body.split_at(n);
        body = tail;
        Ok(head)
    };

    let mut vertices = Vec::with_capacity(n_vertices);
    for _ in 0..n_vertices {
        let chunk = take(12)?;
        let c = |k: usize| f32::from_le_bytes(chunk[4 * k..4 * k + 4].try_into().unwrap()) as f64;
        vertices.push([c(0), c(1), c(2)]);
    }
    let mut faces = Vec::with_capacity(n_faces);
    for face in 0..n_faces {
        let count = take(1)?[0];
        if count != 3 {
            return Err(parse_err(
                path,
                0,
                format!("face {face} has {count} vertices; only triangles are supported"),
            ));
        }
        let chunk = take(12)?;
        let mut tri = [0usize; 3];
        for (k, t) in tri.iter_mut().enumerate() {
            let i = i32::from_le_bytes(chunk[4 * k..4 * k + 4].try_into().unwrap());
            *t = usize::try_from(i)
                .map_err(|_| parse_err(path, 0, format!("face {face} has negative index {i}")))?;
        }
        faces.push(tri);
    }
    if !body.is_empty() {
        return Err(parse_err(path, 0, "trailing bytes after PLY payload"));
    }
    Ok(RawMesh { vertices, faces })
}

/// Dense f32 tensor as stored in the container format.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorHeader {
    dtype: String,
    shape: Vec<usize>,
    order: String,
    endian: String,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("Tensor::new", n, data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn from_matrix(m: &Matrix) -> Self {
        Self {
            shape: vec![m.rows(), m.cols()],
            data: m.as_slice().iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn from_vec(v: &[f64]) -> Self {
        Self {
            shape: vec![v.len()],
            data: v.iter().map(|&x| x as f32).collect(),
        }
    }

    pub fn to_matrix(&self) -> Result<Matrix> {
        let (r, c) = match self.shape.as_slice() {
            [r, c] => (*r, *c),
            [n] => (1, *n),
            other => {
                return Err(Error::shape(
                    "Tensor::to_matrix",
                    "rank 1 or 2",
                    format!("{other:?}"),
                ))
            }
        };
        Matrix::from_vec(r, c, self.data.iter().map(|&v| v as f64).collect())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let header = TensorHeader {
            dtype: "f32".into(),
            shape: self.shape.clone(),
            order: "row-major".into(),
            endian: "little".into(),
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        out.reserve(self.data.len() * 4);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8], context: &str) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::schema(context, "missing header line"))?;
        let header: TensorHeader = serde_json::from_slice(&bytes[..nl])
            .map_err(|e| Error::schema(context, format!("bad header: {e}")))?;
        if header.dtype != "f32" || header.order != "row-major" || header.endian != "little" {
            return Err(Error::schema(
                context,
                format!(
                    "unsupported layout dtype={} order={} endian={}",
                    header.dtype, header.order, header.endian
                ),
            ));
        }
        let payload = &bytes[nl + 1..];
        let n: usize = header.shape.iter().product();
        if payload.len() != n * 4 {
            return Err(Error::schema(
                context,
                format!("payload has {} bytes, shape needs {}", payload.len(), n * 4),
            ));
        }
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::schema(context, "non-finite tensor entry"));
        }
        Ok(Self {
            shape: header.shape,
            data,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, &path.display().to_string())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.encode()).map_err(|e| Error::io(path, e))
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::schema(path.display().to_string(), e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}
