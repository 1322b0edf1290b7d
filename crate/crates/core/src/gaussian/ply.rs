//! PLY import and export for Gaussian clouds and seed point sets.

use std::fs;
use std::path::Path;

use nalgebra::Vector3;

use super::cloud::GaussianCloud;
use super::sh::{num_sh_coeffs, MAX_SH_DEGREE};
use crate::error::{Error, Result};
use crate::nn::Tensor;

const KIND: &str = "ply";

fn property_names(sh_degree: usize) -> Vec<String> {
    let mut names: Vec<String> = ["x", "y", "z", "a1x", "a1y", "a1z", "a2x", "a2y", "a2z", "log_sx", "log_sy", "log_sz", "opacity_logit"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    names.extend((0..3 * num_sh_coeffs(sh_degree)).map(|i| format!("f_{i}")));
    names
}

/// Binary little-endian PLY with one float property per parameter scalar.
pub fn encode_cloud(cloud: &GaussianCloud) -> Vec<u8> {
    let names = property_names(cloud.sh_degree());
    let mut header = format!("ply\nformat binary_little_endian 1.0\nelement vertex {}\n", cloud.len());
    for n in &names {
        header.push_str(&format!("property float {n}\n"));
    }
    header.push_str("end_header\n");
    let mut out = header.into_bytes();
    out.reserve(cloud.len() * names.len() * 4);
    for i in 0..cloud.len() {
        let row = cloud
            .positions
            .row(i)
            .iter()
            .chain(cloud.rot6d.row(i))
            .chain(cloud.log_scales.row(i))
            .chain(std::iter::once(&cloud.opacity_logits.data()[i]))
            .chain(cloud.sh(i));
        for &v in row {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn write_cloud(path: &Path, cloud: &GaussianCloud) -> Result<()> {
    fs::write(path, encode_cloud(cloud)).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug)]
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

    fn read(self, b: &[u8], big_endian: bool) -> f64 {
        macro_rules! rd {
            ($t:ty) => {{
                let a = b.try_into().expect("sized slice");
                (if big_endian { <$t>::from_be_bytes(a) } else { <$t>::from_le_bytes(a) }) as f64
            }};
        }
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => rd!(i16),
            Self::U16 => rd!(u16),
            Self::I32 => rd!(i32),
            Self::U32 => rd!(u32),
            Self::F32 => rd!(f32),
            Self::F64 => rd!(f64),
        }
    }
}

/// The vertex element of a PLY file as named columns.
#[derive(Clone, Debug)]
pub struct PlyVertices {
    pub names: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl PlyVertices {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

struct Element {
    name: String,
    count: usize,
    props: Vec<(String, Scalar)>,
}

pub fn decode_vertices(bytes: &[u8]) -> Result<PlyVertices> {
    let end = find_header_end(bytes).ok_or_else(|| Error::format(KIND, "missing end_header"))?;
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| Error::format(KIND, "header is not UTF-8"))?;
    let mut lines = header.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(Error::format(KIND, "missing ply magic"));
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    for line in lines {
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["format", f, _] => format = Some(f.to_string()),
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count.parse().map_err(|_| Error::format(KIND, format!("bad element count `{count}`")))?,
                props: Vec::new(),
            }),
            ["property", "list", ..] => {
                return Err(Error::format(KIND, "list properties are not supported"));
            }
            ["property", ty, name] => {
                let ty = Scalar::parse(ty).ok_or_else(|| Error::format(KIND, format!("unknown type `{ty}`")))?;
                elements
                    .last_mut()
                    .ok_or_else(|| Error::format(KIND, "property before element"))?
                    .props
                    .push((name.to_string(), ty));
            }
            ["comment", ..] | ["obj_info", ..] | ["end_header"] | [] => {}
            _ => return Err(Error::format(KIND, format!("unexpected header line `{line}`"))),
        }
    }
    let body = &bytes[end..];
    let format = format.ok_or_else(|| Error::format(KIND, "missing format line"))?;
    let mut vertices = None;
    match format.as_str() {
        "ascii" => {
            let text = std::str::from_utf8(body).map_err(|_| Error::format(KIND, "ascii body is not UTF-8"))?;
            let mut lines = text.lines().filter(|l| !l.trim().is_empty());
            for el in &elements {
                let mut rows = Vec::with_capacity(el.count);
                for _ in 0..el.count {
                    let line = lines.next().ok_or_else(|| Error::format(KIND, "truncated ascii body"))?;
                    let row: Vec<f64> = line
                        .split_whitespace()
                        .map(|t| t.parse::<f64>().map_err(|_| Error::format(KIND, format!("bad number `{t}`"))))
                        .collect::<Result<_>>()?;
                    if row.len() != el.props.len() {
                        return Err(Error::format(KIND, "ascii row has the wrong number of values"));
                    }
                    rows.push(row);
                }
                if el.name == "vertex" {
                    vertices = Some((el, rows));
                    break;
                }
            }
        }
        "binary_little_endian" | "binary_big_endian" => {
            let big = format == "binary_big_endian";
            let mut pos = 0;
            for el in &elements {
                let stride: usize = el.props.iter().map(|(_, t)| t.size()).sum();
                if body.len() < pos + stride * el.count {
                    return Err(Error::format(KIND, "truncated binary body"));
                }
                if el.name == "vertex" {
                    let rows = (0..el.count)
                        .map(|i| {
                            let mut off = pos + i * stride;
                            el.props
                                .iter()
                                .map(|(_, t)| {
                                    let v = t.read(&body[off..off + t.size()], big);
                                    off += t.size();
                                    v
                                })
                                .collect()
                        })
                        .collect();
                    vertices = Some((el, rows));
                    break;
                }
                pos += stride * el.count;
            }
        }
        other => return Err(Error::format(KIND, format!("unsupported format `{other}`"))),
    }
    let (el, rows) = vertices.ok_or_else(|| Error::format(KIND, "no vertex element"))?;
    Ok(PlyVertices {
        names: el.props.iter().map(|(n, _)| n.clone()).collect(),
        rows,
    })
}

fn find_header_end(bytes: &[u8]) -> Option<usize> {
    let pat = b"end_header";
    let i = bytes.windows(pat.len()).position(|w| w == pat)?;
    let mut end = i + pat.len();
    if bytes.get(end) == Some(&b'\r') {
        end += 1;
    }
    (bytes.get(end) == Some(&b'\n')).then_some(end + 1)
}

pub fn read_vertices(path: &Path) -> Result<PlyVertices> {
    decode_vertices(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Positions and, when present, `red/green/blue` colors scaled to `[0, 1]`.
pub fn points_from_vertices(v: &PlyVertices) -> Result<(Vec<Vector3<f64>>, Option<Vec<[f64; 3]>>)> {
    let col = |n: &str| v.column(n).ok_or_else(|| Error::format(KIND, format!("missing property `{n}`")));
    let (x, y, z) = (col("x")?, col("y")?, col("z")?);
    let points = v.rows.iter().map(|r| Vector3::new(r[x], r[y], r[z])).collect();
    let colors = match (v.column("red"), v.column("green"), v.column("blue")) {
        (Some(r), Some(g), Some(b)) => {
            let max = if v.rows.iter().any(|row| row[r] > 1.0 || row[g] > 1.0 || row[b] > 1.0) { 255.0 } else { 1.0 };
            Some(v.rows.iter().map(|row| [row[r] / max, row[g] / max, row[b] / max]).collect())
        }
        _ => None,
    };
    Ok((points, colors))
}

/// A full cloud as written by [`write_cloud`].
pub fn cloud_from_vertices(v: &PlyVertices) -> Result<GaussianCloud> {
    let n_sh = v.names.iter().filter(|n| n.starts_with("f_")).count();
    let degree = (0..=MAX_SH_DEGREE)
        .find(|&d| 3 * num_sh_coeffs(d) == n_sh)
        .ok_or_else(|| Error::format(KIND, format!("{n_sh} color coefficients is not 3·(d+1)²")))?;
    let cols: Vec<usize> = property_names(degree)
        .iter()
        .map(|n| v.column(n).ok_or_else(|| Error::format(KIND, format!("missing property `{n}`"))))
        .collect::<Result<_>>()?;
    let n = v.rows.len();
    let k = num_sh_coeffs(degree);
    let take = |range: std::ops::Range<usize>| -> Vec<f64> {
        v.rows.iter().flat_map(|r| cols[range.clone()].iter().map(move |&c| r[c])).collect()
    };
    GaussianCloud::new(
        Tensor::new(vec![n, 3], take(0..3))?,
        Tensor::new(vec![n, 6], take(3..9))?,
        Tensor::new(vec![n, 3], take(9..12))?,
        Tensor::new(vec![n], take(12..13))?,
        Tensor::new(vec![n, 3, k], take(13..13 + 3 * k))?,
        degree,
    )
}

pub fn read_cloud(path: &Path) -> Result<GaussianCloud> {
    cloud_from_vertices(&read_vertices(path)?)
}
