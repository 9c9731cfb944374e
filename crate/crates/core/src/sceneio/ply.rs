//! Binary little-endian PLY checkpoints in the common splat layout.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::SceneError;
use crate::cloud::{sh_basis_count, GaussianCloud, MAX_SH_DEGREE};

/// A cloud with the iteration it was saved at and the hash of its config.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub cloud: GaussianCloud,
    pub iteration: u64,
    pub config_hash: String,
}

const ITERATION_TAG: &str = "mvgs_iteration";
const HASH_TAG: &str = "mvgs_config_hash";
const MAX_HEADER: usize = 64 * 1024;

fn property_names(rest: usize) -> Vec<String> {
    let mut names: Vec<String> = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2"].map(String::from).to_vec();
    names.extend((0..rest).map(|i| format!("f_rest_{i}")));
    names.push("opacity".into());
    names.extend((0..3).map(|i| format!("scale_{i}")));
    names.extend((0..4).map(|i| format!("rot_{i}")));
    names
}

/// Serializes a checkpoint. Attributes are stored as float32.
pub fn write_checkpoint(out: &mut impl Write, checkpoint: &Checkpoint) -> std::io::Result<()> {
    let cloud = &checkpoint.cloud;
    let k = sh_basis_count(cloud.sh_degree);
    let names = property_names(3 * (k - 1));
    let mut header = String::from("ply\nformat binary_little_endian 1.0\n");
    header += &format!("comment {ITERATION_TAG} {}\n", checkpoint.iteration);
    if !checkpoint.config_hash.is_empty() {
        header += &format!("comment {HASH_TAG} {}\n", checkpoint.config_hash);
    }
    header += &format!("element vertex {}\n", cloud.len());
    for n in &names {
        header += &format!("property float {n}\n");
    }
    header += "end_header\n";
    out.write_all(header.as_bytes())?;

    let mut row = Vec::with_capacity(names.len() * 4);
    for i in 0..cloud.len() {
        row.clear();
        let mut put = |v: f64| row.extend_from_slice(&(v as f32).to_le_bytes());
        cloud.positions[i].iter().for_each(|&v| put(v));
        let c = cloud.coeffs(i);
        (0..3).for_each(|ch| put(c[ch]));
        // Higher bands are stored channel-major.
        for ch in 0..3 {
            for b in 1..k {
                put(c[b * 3 + ch]);
            }
        }
        put(cloud.opacity_logits[i]);
        cloud.log_scales[i].iter().for_each(|&v| put(v));
        cloud.rotations[i].iter().for_each(|&v| put(v));
        out.write_all(&row)?;
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<(), SceneError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| SceneError::io(dir, e))?;
    }
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, checkpoint).map_err(|e| SceneError::io(path, e))?;
    fs::write(path, buf).map_err(|e| SceneError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, SceneError> {
    if !path.is_file() {
        return Err(SceneError::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| SceneError::io(path, e))?;
    parse_checkpoint(&bytes)
}

#[derive(Debug, Clone, Copy)]
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
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
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
            Scalar::I8 => f64::from(b[0] as i8),
            Scalar::U8 => f64::from(b[0]),
            Scalar::I16 => f64::from(i16::from_le_bytes([b[0], b[1]])),
            Scalar::U16 => f64::from(u16::from_le_bytes([b[0], b[1]])),
            Scalar::I32 => f64::from(i32::from_le_bytes([b[0], b[1], b[2], b[3]])),
            Scalar::U32 => f64::from(u32::from_le_bytes([b[0], b[1], b[2], b[3]])),
            Scalar::F32 => f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])),
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

struct Property {
    name: String,
    kind: Scalar,
    offset: usize,
}

fn unsupported(msg: impl Into<String>) -> SceneError {
    SceneError::UnsupportedPly(msg.into())
}

/// Parses a checkpoint from bytes. Extra scalar vertex properties are
/// ignored; the SH degree follows from the number of `f_rest_*` fields.
pub fn parse_checkpoint(bytes: &[u8]) -> Result<Checkpoint, SceneError> {
    const END: &[u8] = b"end_header\n";
    let search = &bytes[..bytes.len().min(MAX_HEADER)];
    let header_end = search
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| unsupported("no end_header within the first 64 KiB"))?
        + END.len();
    let header = std::str::from_utf8(&bytes[..header_end]).map_err(|_| unsupported("header is not UTF-8"))?;
    let mut lines = header.lines();
    if lines.next() != Some("ply") {
        return Err(unsupported("missing ply magic"));
    }

    let mut format_ok = false;
    let mut vertex_count: Option<usize> = None;
    let mut in_vertex = false;
    let mut props: Vec<Property> = Vec::new();
    let mut stride = 0usize;
    let mut iteration = 0u64;
    let mut config_hash = String::new();
    for line in lines {
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["format", "binary_little_endian", "1.0"] => format_ok = true,
            ["format", other, ..] => return Err(unsupported(format!("format {other}"))),
            ["comment", tag, value] if *tag == ITERATION_TAG => {
                iteration = value.parse().map_err(|_| unsupported("bad iteration comment"))?;
            }
            ["comment", tag, value] if *tag == HASH_TAG => config_hash = (*value).to_string(),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", "vertex", n] => {
                if vertex_count.is_some() {
                    return Err(unsupported("repeated vertex element"));
                }
                vertex_count = Some(n.parse().map_err(|_| unsupported("bad vertex count"))?);
                in_vertex = true;
            }
            ["element", name, n] => {
                if *n != "0" {
                    return Err(unsupported(format!("element {name}")));
                }
                in_vertex = false;
            }
            ["property", "list", ..] => return Err(unsupported("list properties")),
            ["property", kind, name] => {
                let kind = Scalar::parse(kind).ok_or_else(|| unsupported(format!("property type {kind}")))?;
                if !in_vertex {
                    continue;
                }
                if props.iter().any(|p| p.name == *name) {
                    return Err(unsupported(format!("duplicate property {name}")));
                }
                props.push(Property {
                    name: (*name).to_string(),
                    kind,
                    offset: stride,
                });
                stride += kind.size();
            }
            ["end_header"] => break,
            _ => return Err(unsupported(format!("header line `{line}`"))),
        }
    }
    if !format_ok {
        return Err(unsupported("only binary_little_endian 1.0 is supported"));
    }
    let n = vertex_count.ok_or_else(|| unsupported("no vertex element"))?;

    let rest = props.iter().filter(|p| p.name.starts_with("f_rest_")).count();
    let degree = (0..=MAX_SH_DEGREE)
        .find(|&d| 3 * (sh_basis_count(d) - 1) == rest)
        .ok_or_else(|| unsupported(format!("{rest} f_rest properties")))?;
    let names = property_names(rest);
    let lookup: Vec<&Property> = names
        .iter()
        .map(|name| {
            props
                .iter()
                .find(|p| &p.name == name)
                .ok_or_else(|| SceneError::PropertyMissing(name.clone()))
        })
        .collect::<Result<_, _>>()?;

    let body = &bytes[header_end..];
    let needed = n
        .checked_mul(stride)
        .ok_or_else(|| unsupported("vertex count overflows"))?;
    if body.len() < needed {
        return Err(unsupported(format!(
            "body holds {} bytes, {needed} expected",
            body.len()
        )));
    }

    let k = sh_basis_count(degree);
    let mut cloud = GaussianCloud::empty(degree);
    let mut values = vec![0.0; names.len()];
    let mut coeffs = vec![0.0; 3 * k];
    for row in body[..needed].chunks_exact(stride.max(1)).take(n) {
        for (v, p) in values.iter_mut().zip(&lookup) {
            *v = p.kind.read(&row[p.offset..]);
        }
        for ch in 0..3 {
            coeffs[ch] = values[3 + ch];
            for b in 1..k {
                coeffs[b * 3 + ch] = values[6 + ch * (k - 1) + b - 1];
            }
        }
        let tail = 6 + rest;
        cloud.push(
            [values[0], values[1], values[2]],
            [values[tail + 4], values[tail + 5], values[tail + 6], values[tail + 7]],
            [values[tail + 1], values[tail + 2], values[tail + 3]],
            values[tail],
            &coeffs,
        );
    }
    Ok(Checkpoint {
        cloud,
        iteration,
        config_hash,
    })
}
