//! Binary greyscale (P5) images of attention buffers.

use std::fs;
use std::path::{Path, PathBuf};

use crate::distill::{ToyStudent, ToyTeacher};
use crate::error::{Result, SeaError};
use crate::sea::expand_compressed;
use crate::tensor::Tensor;

/// Row-major `rows × cols` image, min-max scaled to 0..=255. Constant input is black.
pub fn encode(values: &[f64], rows: usize, cols: usize) -> Result<Vec<u8>> {
    if values.len() != rows * cols || rows == 0 || cols == 0 {
        return Err(SeaError::dim("pgm", format!("{} values for a {rows}x{cols} image", values.len())));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(SeaError::Contract("pgm: non-finite pixel".into()));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend(values.iter().map(|v| {
        if span > 0.0 {
            (255.0 * (v - lo) / span).round() as u8
        } else {
            0
        }
    }));
    Ok(out)
}

/// Parses an image written by [`encode`]: `(rows, cols, pixels)`.
pub fn decode(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = || SeaError::Format("not a P5 image".into());
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?.to_string());
    }
    pos += 1;
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad());
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad());
    }
    let (cols, rows) = (num(&fields[1])?, num(&fields[2])?);
    let pixels = bytes.get(pos..).ok_or_else(bad)?.to_vec();
    if pixels.len() != rows * cols {
        return Err(bad());
    }
    Ok((rows, cols, pixels))
}

fn head_slice(t: &Tensor, h: usize) -> (Vec<f64>, usize, usize) {
    let (rows, cols) = (t.dim(1), t.dim(2));
    (t.data()[h * rows * cols..(h + 1) * rows * cols].to_vec(), rows, cols)
}

/// Writes `layer{l}_head{h}_{buffer}.pgm` for every layer and head:
/// `a_hat` (T×K), `a_hat_full` (resized to T×T), `m_hat` (T×K), `mask`,
/// `a_star` and `teacher` (T×T). Returns the written paths.
pub fn dump_attention(
    student: &ToyStudent,
    teacher: &ToyTeacher,
    tokens: &[usize],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let diags = student.diagnostics(tokens, student.sea_cfg.top_k)?;
    let trace = teacher.trace(tokens)?;
    let causal = student.sea_cfg.causal;
    let mut written = Vec::new();
    for (l, d) in diags.iter().enumerate() {
        let buffers: [(&str, Tensor); 6] = [
            ("a_hat", d.a_hat.clone()),
            ("a_hat_full", expand_compressed(&d.a_hat, causal)),
            ("m_hat", d.compressed.to_dense()),
            ("mask", d.mask.densify()),
            ("a_star", d.a_star.densify()),
            ("teacher", trace.attn[l].clone()),
        ];
        for (name, t) in &buffers {
            for h in 0..t.dim(0) {
                let (px, rows, cols) = head_slice(t, h);
                let path = out_dir.join(format!("layer{l}_head{h}_{name}.pgm"));
                fs::write(&path, encode(&px, rows, cols)?)?;
                written.push(path);
            }
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_input_maps_to_black_and_white() {
        let img = encode(&[0.0, 1.0, 1.0, 0.0, 0.0, 1.0], 2, 3).unwrap();
        assert!(img.starts_with(b"P5\n3 2\n255\n"));
        let (r, c, px) = decode(&img).unwrap();
        assert_eq!((r, c), (2, 3));
        assert_eq!(px, vec![0, 255, 255, 0, 0, 255]);
    }

    #[test]
    fn scaling_and_constant_images() {
        let (_, _, px) = decode(&encode(&[-1.0, 0.0, 1.0], 1, 3).unwrap()).unwrap();
        assert_eq!(px, vec![0, 128, 255]);
        let (_, _, px) = decode(&encode(&[0.3; 4], 2, 2).unwrap()).unwrap();
        assert_eq!(px, vec![0; 4]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(encode(&[0.0; 3], 2, 2).is_err());
        assert!(encode(&[f64::NAN], 1, 1).is_err());
        assert!(decode(b"P6\n1 1\n255\n\0").is_err());
        assert!(decode(b"P5\n2 2\n255\n\0").is_err());
    }
}
