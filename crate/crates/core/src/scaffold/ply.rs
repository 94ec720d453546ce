//! Binary little-endian PLY point clouds (`x`, `y`, `z` as 32-bit floats).

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::ScaffoldError;

pub fn write_points<W: Write>(mut w: W, points: &[[f64; 3]]) -> Result<(), ScaffoldError> {
    write!(
        w,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
        points.len()
    )?;
    let mut buf = Vec::with_capacity(points.len() * 12);
    for p in points {
        for &c in p {
            buf.extend_from_slice(&(c as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn save_points(path: &Path, points: &[[f64; 3]]) -> Result<(), ScaffoldError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_points(&mut f, points)?;
    f.flush()?;
    Ok(())
}

fn scalar_size(ty: &str) -> Option<usize> {
    Some(match ty {
        "char" | "uchar" | "int8" | "uint8" => 1,
        "short" | "ushort" | "int16" | "uint16" => 2,
        "int" | "uint" | "int32" | "uint32" | "float" | "float32" => 4,
        "double" | "float64" => 8,
        _ => return None,
    })
}

fn bad(msg: impl Into<String>) -> ScaffoldError {
    ScaffoldError::Ply(msg.into())
}

/// Reads vertex positions. Extra scalar vertex properties are skipped;
/// `x`, `y`, `z` may be float or double.
pub fn read_points<R: Read>(r: R) -> Result<Vec<[f64; 3]>, ScaffoldError> {
    let mut r = BufReader::new(r);
    let mut line = String::new();
    let mut next = |r: &mut BufReader<R>| -> Result<String, ScaffoldError> {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(bad("unexpected end of header"));
        }
        Ok(line.trim_end().to_string())
    };
    if next(&mut r)? != "ply" {
        return Err(bad("missing ply magic"));
    }
    let mut vertices = None;
    let mut in_vertex = false;
    let mut props: Vec<(String, &'static str, usize)> = Vec::new();
    loop {
        let l = next(&mut r)?;
        let tok: Vec<&str> = l.split_whitespace().collect();
        match tok.as_slice() {
            ["format", "binary_little_endian", _] => {}
            ["format", other, _] => return Err(bad(format!("unsupported format {other}"))),
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", name, count] => {
                if vertices.is_some() {
                    // Elements after the vertices are not needed.
                    in_vertex = false;
                    continue;
                }
                in_vertex = *name == "vertex";
                if in_vertex {
                    vertices = Some(count.parse::<usize>().map_err(|_| bad("bad vertex count"))?);
                } else {
                    return Err(bad("vertex element must come first"));
                }
            }
            ["property", "list", ..] if in_vertex => return Err(bad("list vertex properties unsupported")),
            ["property", ty, name] if in_vertex => {
                let size = scalar_size(ty).ok_or_else(|| bad(format!("unknown type {ty}")))?;
                let kind = match *ty {
                    "float" | "float32" => "f32",
                    "double" | "float64" => "f64",
                    _ => "other",
                };
                props.push((name.to_string(), kind, size));
            }
            ["property", ..] => {}
            ["end_header"] => break,
            _ => return Err(bad(format!("unexpected header line {l:?}"))),
        }
    }
    let n = vertices.ok_or_else(|| bad("no vertex element"))?;
    let stride: usize = props.iter().map(|p| p.2).sum();
    let mut slots = [None; 3];
    let mut off = 0;
    for (name, kind, size) in &props {
        if let Some(a) = ["x", "y", "z"].iter().position(|c| c == name) {
            if *kind == "other" {
                return Err(bad("coordinates must be float or double"));
            }
            slots[a] = Some((off, *kind));
        }
        off += size;
    }
    let slots: Vec<(usize, &str)> = slots
        .iter()
        .map(|s| s.ok_or_else(|| bad("missing x, y or z")))
        .collect::<Result<_, _>>()?;
    let mut body = vec![0u8; n * stride];
    r.read_exact(&mut body)?;
    Ok(body
        .chunks_exact(stride.max(1))
        .take(n)
        .map(|rec| {
            let get = |(o, kind): (usize, &str)| {
                if kind == "f32" {
                    f32::from_le_bytes(rec[o..o + 4].try_into().expect("4 bytes")) as f64
                } else {
                    f64::from_le_bytes(rec[o..o + 8].try_into().expect("8 bytes"))
                }
            };
            [get(slots[0]), get(slots[1]), get(slots[2])]
        })
        .collect())
}

pub fn load_points(path: &Path) -> Result<Vec<[f64; 3]>, ScaffoldError> {
    read_points(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_f32() {
        let pts = vec![[0.5, -1.25, 3.0], [1e-3, 2.0, -7.5]];
        let mut buf = Vec::new();
        write_points(&mut buf, &pts).unwrap();
        let header_end = buf.windows(11).position(|w| w == b"end_header\n").unwrap() + 11;
        assert_eq!(buf.len() - header_end, 24);
        let back = read_points(&buf[..]).unwrap();
        for (a, b) in pts.iter().zip(&back) {
            for i in 0..3 {
                assert_eq!(b[i], a[i] as f32 as f64);
            }
        }
    }

    #[test]
    fn skips_extra_properties() {
        let mut buf = b"ply\nformat binary_little_endian 1.0\ncomment test\nelement vertex 1\nproperty uchar red\nproperty double x\nproperty float y\nproperty float z\nend_header\n".to_vec();
        buf.push(7);
        buf.extend_from_slice(&2.5f64.to_le_bytes());
        buf.extend_from_slice(&1.0f32.to_le_bytes());
        buf.extend_from_slice(&(-1.0f32).to_le_bytes());
        assert_eq!(read_points(&buf[..]).unwrap(), vec![[2.5, 1.0, -1.0]]);
    }

    #[test]
    fn rejects_ascii() {
        let buf = b"ply\nformat ascii 1.0\nelement vertex 0\nend_header\n";
        assert!(read_points(&buf[..]).is_err());
    }
}
