//! Gaussian set export/import as a standard point-cloud PLY.
//!
//! Every field is stored as a named `double` vertex property, so both the
//! ASCII and the binary little-endian encodings round-trip bit-for-bit.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{Gaussian3D, GaussianSet};
use crate::geometry::{UnitQuat, Vec3};

/// Property names in file order; index matches [`Gaussian3D::to_params`].
pub const PROPERTIES: [&str; 14] = [
    "x", "y", "z", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3", "opacity",
    "r", "g", "b",
];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlyFormat {
    Ascii,
    #[default]
    BinaryLittleEndian,
}

impl PlyFormat {
    fn keyword(self) -> &'static str {
        match self {
            PlyFormat::Ascii => "ascii",
            PlyFormat::BinaryLittleEndian => "binary_little_endian",
        }
    }
}

fn params_to_gaussian(p: &[f64; 14]) -> Gaussian3D {
    // No renormalization: the stored quaternion is taken verbatim.
    Gaussian3D {
        mean: Vec3::new(p[0], p[1], p[2]),
        scale: Vec3::new(p[3], p[4], p[5]),
        rotation: UnitQuat {
            w: p[6],
            x: p[7],
            y: p[8],
            z: p[9],
        },
        opacity: p[10],
        color: [p[11], p[12], p[13]],
    }
}

/// Serializes a set into PLY bytes.
pub fn encode_ply(set: &GaussianSet, format: PlyFormat) -> Vec<u8> {
    let mut out = Vec::new();
    let _ = writeln!(out, "ply");
    let _ = writeln!(out, "format {} 1.0", format.keyword());
    let _ = writeln!(out, "comment gaussian splats");
    let _ = writeln!(out, "element vertex {}", set.len());
    for name in PROPERTIES {
        let _ = writeln!(out, "property double {name}");
    }
    let _ = writeln!(out, "end_header");
    for g in &set.gaussians {
        let p = g.to_params();
        match format {
            PlyFormat::Ascii => {
                // `{:?}` prints the shortest representation that parses back
                // to the same bits (and keeps the sign of -0.0).
                let line: Vec<String> = p.iter().map(|v| format!("{v:?}")).collect();
                let _ = writeln!(out, "{}", line.join(" "));
            }
            PlyFormat::BinaryLittleEndian => {
                for v in p {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    out
}

pub fn write_ply(set: &GaussianSet, path: &Path, format: PlyFormat) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, encode_ply(set, format))?;
    Ok(())
}

fn ply_err(line: usize, message: impl Into<String>) -> Error {
    Error::Ply {
        line,
        message: message.into(),
    }
}

/// Parses PLY bytes written by [`encode_ply`] (or any file with the same
/// vertex layout; extra properties are rejected).
pub fn decode_ply(bytes: &[u8]) -> Result<GaussianSet> {
    let mut reader = BufReader::new(bytes);
    let mut line_no = 0usize;
    let mut next_line = |reader: &mut BufReader<&[u8]>| -> Result<(usize, String)> {
        let mut s = String::new();
        let n = reader.read_line(&mut s)?;
        line_no += 1;
        if n == 0 {
            return Err(ply_err(line_no, "unexpected end of file in header"));
        }
        Ok((line_no, s.trim_end_matches(['\n', '\r']).to_string()))
    };

    let (l, magic) = next_line(&mut reader)?;
    if magic != "ply" {
        return Err(ply_err(l, format!("expected 'ply' magic, found {magic:?}")));
    }
    let mut format = None;
    let mut count = None;
    let mut props: Vec<String> = Vec::new();
    let mut header_lines;
    loop {
        let (l, line) = next_line(&mut reader)?;
        header_lines = l;
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["end_header"] => break,
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["format", kind, version] => {
                if *version != "1.0" {
                    return Err(ply_err(l, format!("unsupported version {version}")));
                }
                format = Some(match *kind {
                    "ascii" => PlyFormat::Ascii,
                    "binary_little_endian" => PlyFormat::BinaryLittleEndian,
                    other => return Err(ply_err(l, format!("unsupported format {other}"))),
                });
            }
            ["element", "vertex", n] => {
                if count.is_some() {
                    return Err(ply_err(l, "duplicate vertex element"));
                }
                count = Some(
                    n.parse::<usize>()
                        .map_err(|_| ply_err(l, format!("bad vertex count {n:?}")))?,
                );
            }
            ["element", name, _] => {
                return Err(ply_err(l, format!("unsupported element {name:?}")));
            }
            ["property", ty, name] => {
                if count.is_none() {
                    return Err(ply_err(l, "property before element"));
                }
                if *ty != "double" && *ty != "float64" {
                    return Err(ply_err(
                        l,
                        format!("property {name} has type {ty}; only double is lossless"),
                    ));
                }
                props.push((*name).to_string());
            }
            _ => return Err(ply_err(l, format!("unrecognized header line {line:?}"))),
        }
    }
    let format = format.ok_or_else(|| ply_err(header_lines, "missing format line"))?;
    let count = count.ok_or_else(|| ply_err(header_lines, "missing vertex element"))?;
    if props != PROPERTIES {
        return Err(ply_err(
            header_lines,
            format!("vertex properties {props:?} do not match {PROPERTIES:?}"),
        ));
    }

    let mut gaussians = Vec::with_capacity(count.min(1 << 20));
    match format {
        PlyFormat::Ascii => {
            let mut l = header_lines;
            let mut s = String::new();
            while gaussians.len() < count {
                s.clear();
                l += 1;
                if reader.read_line(&mut s)? == 0 {
                    return Err(ply_err(
                        l,
                        format!("expected {count} vertices, found {}", gaussians.len()),
                    ));
                }
                let toks: Vec<&str> = s.split_whitespace().collect();
                if toks.is_empty() {
                    continue;
                }
                if toks.len() != 14 {
                    return Err(ply_err(l, format!("expected 14 values, found {}", toks.len())));
                }
                let mut p = [0.0; 14];
                for (dst, t) in p.iter_mut().zip(&toks) {
                    *dst = t
                        .parse::<f64>()
                        .map_err(|_| ply_err(l, format!("bad number {t:?}")))?;
                }
                gaussians.push(params_to_gaussian(&p));
            }
        }
        PlyFormat::BinaryLittleEndian => {
            let mut buf = [0u8; 14 * 8];
            for i in 0..count {
                reader.read_exact(&mut buf).map_err(|_| {
                    ply_err(
                        header_lines,
                        format!("binary body truncated at vertex {i} of {count}"),
                    )
                })?;
                let mut p = [0.0; 14];
                for (k, dst) in p.iter_mut().enumerate() {
                    let mut b = [0u8; 8];
                    b.copy_from_slice(&buf[k * 8..k * 8 + 8]);
                    *dst = f64::from_le_bytes(b);
                }
                gaussians.push(params_to_gaussian(&p));
            }
        }
    }
    Ok(GaussianSet::new(gaussians))
}

pub fn read_ply(path: &Path) -> Result<GaussianSet> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    decode_ply(&fs::read(path)?)
}
