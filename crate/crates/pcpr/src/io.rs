//! File formats: ASCII XYZ / PLY point clouds, OBJ / PLY meshes, and the
//! versioned binary checkpoint container.
//!
//! Checkpoint layout: magic `PCPR`, a little-endian u32 format version, a
//! little-endian u64 header length, a JSON header (architecture, config
//! snapshot, loss history, named-tensor directory with byte offsets), then
//! the payload of little-endian IEEE-754 single-precision tensors in
//! row-major order.

use crate::autodiff::ParamGroup;
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::mesher::TriangleMesh;
use crate::nets::{ArchConfig, ImplicitNet, QueryNet, RegionEncoder};
use crate::prior::{PriorCheckpoint, TrainConfig};
use crate::rng::{self, Stream};
use crate::specialize::{GlobalSdf, SpecializeConfig, SpecializeMode};
use crate::tensor::Tensor;
use std::collections::HashMap;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"PCPR";
const VERSION: u32 = 1;

// ----- point clouds -------------------------------------------------------------

/// Read an ASCII XYZ or ASCII PLY point cloud; the format is sniffed from
/// the content. XYZ lines may carry extra columns, which are ignored; a
/// two-column file is read as a 2D cloud.
pub fn read_pointcloud(path: &Path) -> Result<PointCloud> {
    let text = std::fs::read_to_string(path)?;
    if text.trim_start().starts_with("ply") {
        read_ply_cloud(path, &text)
    } else {
        read_xyz(path, &text)
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

fn read_xyz(path: &Path, text: &str) -> Result<PointCloud> {
    let mut dim = 0usize;
    let mut data = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if dim == 0 {
            dim = if fields.len() >= 3 { 3 } else { 2 };
        }
        if fields.len() < dim {
            return Err(parse_err(
                path,
                lineno + 1,
                format!("expected {dim} coordinates, found {}", fields.len()),
            ));
        }
        for f in &fields[..dim] {
            let v: f64 = f.parse().map_err(|_| {
                parse_err(path, lineno + 1, format!("invalid float '{f}'"))
            })?;
            data.push(v);
        }
    }
    if data.is_empty() {
        return Err(parse_err(path, 1, "no points in file"));
    }
    PointCloud::new(dim, data)
}

fn read_ply_cloud(path: &Path, text: &str) -> Result<PointCloud> {
    let (mesh, normals) = parse_ply(path, text)?;
    let data: Vec<f64> = mesh.vertices.iter().flatten().copied().collect();
    if data.is_empty() {
        return Err(parse_err(path, 1, "no vertices in PLY file"));
    }
    let cloud = PointCloud::new(3, data)?;
    match normals {
        Some(n) => cloud.with_normals(n),
        None => Ok(cloud),
    }
}

/// Read a triangle mesh from OBJ or ASCII PLY.
pub fn read_mesh(path: &Path) -> Result<TriangleMesh> {
    let text = std::fs::read_to_string(path)?;
    if text.trim_start().starts_with("ply") {
        Ok(parse_ply(path, &text)?.0)
    } else {
        parse_obj(path, &text)
    }
}

fn parse_obj(path: &Path, text: &str) -> Result<TriangleMesh> {
    let mut mesh = TriangleMesh::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let mut fields = line.split_whitespace();
        match fields.next() {
            Some("v") => {
                let mut v = [0.0f64; 3];
                for x in v.iter_mut() {
                    let f = fields.next().ok_or_else(|| {
                        parse_err(path, lineno + 1, "vertex with fewer than 3 coordinates")
                    })?;
                    *x = f.parse().map_err(|_| {
                        parse_err(path, lineno + 1, format!("invalid float '{f}'"))
                    })?;
                }
                mesh.vertices.push(v);
            }
            Some("f") => {
                let mut idx = Vec::new();
                for f in fields {
                    let first = f.split('/').next().unwrap_or(f);
                    let i: i64 = first.parse().map_err(|_| {
                        parse_err(path, lineno + 1, format!("invalid face index '{f}'"))
                    })?;
                    if i < 1 || i as usize > mesh.vertices.len() {
                        return Err(parse_err(
                            path,
                            lineno + 1,
                            format!("face index {i} out of range"),
                        ));
                    }
                    idx.push((i - 1) as u32);
                }
                if idx.len() < 3 {
                    return Err(parse_err(path, lineno + 1, "face with fewer than 3 indices"));
                }
                for k in 1..idx.len() - 1 {
                    mesh.triangles.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    Ok(mesh)
}

fn parse_ply(path: &Path, text: &str) -> Result<(TriangleMesh, Option<Vec<f64>>)> {
    let mut lines = text.lines().enumerate();
    let mut vertex_count = 0usize;
    let mut face_count = 0usize;
    let mut vertex_props: Vec<String> = Vec::new();
    let mut in_vertex_element = false;
    let mut header_end = 0usize;
    for (lineno, raw) in lines.by_ref() {
        let line = raw.trim();
        if lineno == 0 {
            if line != "ply" {
                return Err(parse_err(path, 1, "missing 'ply' magic"));
            }
            continue;
        }
        if line.starts_with("format") {
            if !line.contains("ascii") {
                return Err(parse_err(path, lineno + 1, "only ASCII PLY is supported"));
            }
        } else if let Some(rest) = line.strip_prefix("element vertex ") {
            vertex_count = rest
                .trim()
                .parse()
                .map_err(|_| parse_err(path, lineno + 1, "invalid vertex count"))?;
            in_vertex_element = true;
        } else if let Some(rest) = line.strip_prefix("element face ") {
            face_count = rest
                .trim()
                .parse()
                .map_err(|_| parse_err(path, lineno + 1, "invalid face count"))?;
            in_vertex_element = false;
        } else if line.starts_with("element ") {
            in_vertex_element = false;
        } else if line.starts_with("property") && in_vertex_element {
            let name = line.split_whitespace().last().unwrap_or("").to_string();
            vertex_props.push(name);
        } else if line == "end_header" {
            header_end = lineno + 1;
            break;
        }
    }
    if header_end == 0 {
        return Err(parse_err(path, 1, "missing end_header"));
    }
    let find = |n: &str| vertex_props.iter().position(|p| p == n);
    let (ix, iy, iz) = match (find("x"), find("y"), find("z")) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => return Err(parse_err(path, 1, "PLY vertex element lacks x/y/z properties")),
    };
    let normal_idx = match (find("nx"), find("ny"), find("nz")) {
        (Some(a), Some(b), Some(c)) => Some((a, b, c)),
        _ => None,
    };

    let mut mesh = TriangleMesh::default();
    let mut normals = Vec::new();
    for _ in 0..vertex_count {
        let (lineno, raw) = lines
            .next()
            .ok_or_else(|| parse_err(path, header_end, "unexpected end of vertex data"))?;
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.len() < vertex_props.len() {
            return Err(parse_err(path, lineno + 1, "short vertex row"));
        }
        let get = |k: usize| -> Result<f64> {
            fields[k]
                .parse()
                .map_err(|_| parse_err(path, lineno + 1, format!("invalid float '{}'", fields[k])))
        };
        mesh.vertices.push([get(ix)?, get(iy)?, get(iz)?]);
        if let Some((a, b, c)) = normal_idx {
            normals.extend([get(a)?, get(b)?, get(c)?]);
        }
    }
    for _ in 0..face_count {
        let (lineno, raw) = lines
            .next()
            .ok_or_else(|| parse_err(path, header_end, "unexpected end of face data"))?;
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.is_empty() {
            return Err(parse_err(path, lineno + 1, "empty face row"));
        }
        let cnt: usize = fields[0]
            .parse()
            .map_err(|_| parse_err(path, lineno + 1, "invalid face vertex count"))?;
        if fields.len() < cnt + 1 || cnt < 3 {
            return Err(parse_err(path, lineno + 1, "malformed face row"));
        }
        let mut idx = Vec::with_capacity(cnt);
        for f in &fields[1..=cnt] {
            let i: usize = f
                .parse()
                .map_err(|_| parse_err(path, lineno + 1, format!("invalid index '{f}'")))?;
            if i >= mesh.vertices.len() {
                return Err(parse_err(path, lineno + 1, format!("face index {i} out of range")));
            }
            idx.push(i as u32);
        }
        for k in 1..idx.len() - 1 {
            mesh.triangles.push([idx[0], idx[k], idx[k + 1]]);
        }
    }
    let normals = (!normals.is_empty()).then_some(normals);
    Ok((mesh, normals))
}

fn fmt9(x: f64) -> String {
    format!("{x:.9}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshFormat {
    Obj,
    Ply,
}

impl MeshFormat {
    pub fn from_extension(path: &Path) -> MeshFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some("ply") => MeshFormat::Ply,
            _ => MeshFormat::Obj,
        }
    }
}

/// Write a mesh as OBJ (1-based indices) or ASCII PLY. Writers are
/// deterministic byte for byte.
pub fn write_mesh(mesh: &TriangleMesh, path: &Path, format: MeshFormat) -> Result<()> {
    if mesh.is_empty() {
        log::warn!("writing empty mesh to {}", path.display());
    }
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    match format {
        MeshFormat::Obj => {
            for v in &mesh.vertices {
                writeln!(out, "v {} {} {}", fmt9(v[0]), fmt9(v[1]), fmt9(v[2]))?;
            }
            for t in &mesh.triangles {
                writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
            }
        }
        MeshFormat::Ply => {
            writeln!(out, "ply")?;
            writeln!(out, "format ascii 1.0")?;
            writeln!(out, "element vertex {}", mesh.vertices.len())?;
            writeln!(out, "property float x")?;
            writeln!(out, "property float y")?;
            writeln!(out, "property float z")?;
            writeln!(out, "element face {}", mesh.triangles.len())?;
            writeln!(out, "property list uchar int vertex_indices")?;
            writeln!(out, "end_header")?;
            for v in &mesh.vertices {
                writeln!(out, "{} {} {}", fmt9(v[0]), fmt9(v[1]), fmt9(v[2]))?;
            }
            for t in &mesh.triangles {
                writeln!(out, "3 {} {} {}", t[0], t[1], t[2])?;
            }
        }
    }
    Ok(())
}

/// Write positions (and normals when given) as an ASCII XYZ file.
pub fn write_xyz(points: &[f64], normals: Option<&[f64]>, dim: usize, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    let n = points.len() / dim;
    for i in 0..n {
        let row: Vec<String> = points[i * dim..(i + 1) * dim].iter().map(|&x| fmt9(x)).collect();
        write!(out, "{}", row.join(" "))?;
        if let Some(nm) = normals {
            let row: Vec<String> = nm[i * dim..(i + 1) * dim].iter().map(|&x| fmt9(x)).collect();
            write!(out, " {}", row.join(" "))?;
        }
        writeln!(out)?;
    }
    Ok(())
}

// ----- checkpoints ---------------------------------------------------------------

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct TensorEntry {
    name: String,
    dims: Vec<usize>,
    offset: u64,
    byte_len: u64,
}

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct CheckpointHeader {
    kind: String,
    arch: ArchConfig,
    config: serde_json::Value,
    mode: Option<SpecializeMode>,
    loss_history: Vec<(u64, f64)>,
    tensors: Vec<TensorEntry>,
}

fn ck_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

fn write_checkpoint(
    path: &Path,
    kind: &str,
    arch: &ArchConfig,
    config: serde_json::Value,
    mode: Option<SpecializeMode>,
    loss_history: &[(u64, f64)],
    tensors: &[(String, &Tensor)],
) -> Result<()> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in tensors {
        let byte_len = (t.len() * 4) as u64;
        entries.push(TensorEntry {
            name: name.clone(),
            dims: t.dims().to_vec(),
            offset,
            byte_len,
        });
        offset += byte_len;
    }
    let header = CheckpointHeader {
        kind: kind.to_string(),
        arch: arch.clone(),
        config,
        mode,
        loss_history: loss_history.to_vec(),
        tensors: entries,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    out.write_all(&header_bytes)?;
    for (_, t) in tensors {
        for &x in t.data() {
            out.write_all(&(x as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_checkpoint(path: &Path) -> Result<(CheckpointHeader, HashMap<String, Tensor>)> {
    let mut file = std::fs::File::open(path)?;
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)
        .map_err(|_| ck_err(path, "file shorter than magic"))?;
    if &magic != MAGIC {
        return Err(ck_err(path, format!("bad magic {magic:?}")));
    }
    let mut word = [0u8; 4];
    file.read_exact(&mut word)
        .map_err(|_| ck_err(path, "file shorter than version"))?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(ck_err(
            path,
            format!("unsupported checkpoint version {version}, expected {VERSION}"),
        ));
    }
    let mut len8 = [0u8; 8];
    file.read_exact(&mut len8)
        .map_err(|_| ck_err(path, "file shorter than header length"))?;
    let header_len = u64::from_le_bytes(len8) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)
        .map_err(|_| ck_err(path, "file shorter than header"))?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| ck_err(path, format!("invalid header: {e}")))?;
    let mut payload = Vec::new();
    file.read_to_end(&mut payload)?;

    let mut tensors = HashMap::new();
    for entry in &header.tensors {
        let expect = entry.dims.iter().product::<usize>().max(1) * 4;
        if expect as u64 != entry.byte_len {
            return Err(ck_err(
                path,
                format!("tensor '{}' byte count does not match shape", entry.name),
            ));
        }
        let end = entry.offset + entry.byte_len;
        if end as usize > payload.len() {
            return Err(ck_err(path, "payload shorter than directory"));
        }
        let bytes = &payload[entry.offset as usize..end as usize];
        let data: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        tensors.insert(entry.name.clone(), Tensor::from_dims(entry.dims.clone(), data));
    }
    Ok((header, tensors))
}

fn group_tensors(group: &ParamGroup) -> Vec<(String, &Tensor)> {
    group
        .params()
        .iter()
        .map(|p| (p.name.clone(), &p.value))
        .collect()
}

fn fill_group(
    path: &Path,
    group: &mut ParamGroup,
    tensors: &mut HashMap<String, Tensor>,
) -> Result<()> {
    let names: Vec<String> = group.params().iter().map(|p| p.name.clone()).collect();
    for name in names {
        let t = tensors
            .remove(&name)
            .ok_or_else(|| ck_err(path, format!("missing tensor '{name}'")))?;
        let p = group.get_mut(&name).unwrap();
        if t.dims() != p.value.dims() {
            return Err(ck_err(
                path,
                format!(
                    "tensor '{name}' has shape {:?}, expected {:?}",
                    t.dims(),
                    p.value.dims()
                ),
            ));
        }
        p.value = t;
    }
    Ok(())
}

pub fn save_prior_checkpoint(ck: &PriorCheckpoint, path: &Path) -> Result<()> {
    let mut tensors = group_tensors(&ck.encoder.group);
    tensors.extend(group_tensors(&ck.implicit.group));
    write_checkpoint(
        path,
        "prior",
        &ck.config.arch,
        serde_json::to_value(&ck.config)?,
        None,
        &ck.loss_history,
        &tensors,
    )
}

pub fn load_prior_checkpoint(path: &Path) -> Result<PriorCheckpoint> {
    let (header, mut tensors) = read_checkpoint(path)?;
    if header.kind != "prior" {
        return Err(ck_err(path, format!("expected a prior checkpoint, found '{}'", header.kind)));
    }
    let config: TrainConfig = serde_json::from_value(header.config.clone())
        .map_err(|e| ck_err(path, format!("invalid train config: {e}")))?;
    let mut init = rng::substream(0, Stream::Init, 0, 0);
    let mut encoder = RegionEncoder::new(&header.arch, &mut init);
    let mut implicit = ImplicitNet::new(&header.arch, &mut init);
    fill_group(path, &mut encoder.group, &mut tensors)?;
    fill_group(path, &mut implicit.group, &mut tensors)?;
    if let Some(name) = tensors.keys().next() {
        return Err(ck_err(path, format!("unexpected tensor '{name}'")));
    }
    Ok(PriorCheckpoint {
        encoder,
        implicit,
        config,
        loss_history: header.loss_history,
    })
}

pub fn save_global_sdf(sdf: &GlobalSdf, path: &Path) -> Result<()> {
    let mut tensors = group_tensors(&sdf.implicit.group);
    tensors.extend(group_tensors(&sdf.qnet.group));
    if let Some(fc) = &sdf.fixed_cond {
        tensors.push(("fixed_cond".to_string(), fc));
    }
    write_checkpoint(
        path,
        "specialized",
        sdf.implicit.cfg(),
        serde_json::to_value(&sdf.config)?,
        Some(sdf.mode),
        &sdf.loss_history,
        &tensors,
    )
}

pub fn load_global_sdf(path: &Path) -> Result<GlobalSdf> {
    let (header, mut tensors) = read_checkpoint(path)?;
    if header.kind != "specialized" {
        return Err(ck_err(
            path,
            format!("expected a specialized checkpoint, found '{}'", header.kind),
        ));
    }
    let config: SpecializeConfig = serde_json::from_value(header.config.clone())
        .map_err(|e| ck_err(path, format!("invalid specialize config: {e}")))?;
    let mode = header
        .mode
        .ok_or_else(|| ck_err(path, "specialized checkpoint lacks a mode"))?;
    let mut init = rng::substream(0, Stream::Init, 0, 0);
    let mut implicit = ImplicitNet::new(&header.arch, &mut init);
    let mut qnet = QueryNet::new(&header.arch, &mut init);
    fill_group(path, &mut implicit.group, &mut tensors)?;
    fill_group(path, &mut qnet.group, &mut tensors)?;
    let fixed_cond = tensors.remove("fixed_cond");
    if let Some(name) = tensors.keys().next() {
        return Err(ck_err(path, format!("unexpected tensor '{name}'")));
    }
    Ok(GlobalSdf {
        implicit,
        qnet,
        mode,
        fixed_cond,
        config,
        loss_history: header.loss_history,
    })
}
