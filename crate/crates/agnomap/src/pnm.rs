//! Binary PGM (P5) and PPM (P6) reader/writer, 8-bit, maxval 255.
//!
//! Export quantizes [0,1] f32 pixels to u8; the in-memory pipeline stays f32.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Write a [h,w,c] tensor with pixels in [0,1]; c=1 emits P5, c=3 emits P6.
pub fn write_image<P: AsRef<Path>>(path: P, img: &Tensor) -> Result<()> {
    let shape = img.shape();
    let (h, w, c) = match shape {
        [h, w] => (*h, *w, 1),
        [h, w, c] if *c == 1 || *c == 3 => (*h, *w, *c),
        _ => {
            return Err(Error::Input(format!(
                "cannot export shape {:?} as PGM/PPM",
                shape
            )))
        }
    };
    let mut out = BufWriter::new(File::create(path)?);
    let magic = if c == 1 { "P5" } else { "P6" };
    write!(out, "{}\n{} {}\n255\n", magic, w, h)?;
    let bytes: Vec<u8> = img
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}

/// Read a P5 or P6 file into a [h,w,c] tensor with pixels in [0,1].
pub fn read_image<P: AsRef<Path>>(path: P) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = read_token(&mut r)?;
    let c = match magic.as_str() {
        "P5" => 1usize,
        "P6" => 3usize,
        other => return Err(Error::Format(format!("unsupported magic {:?}", other))),
    };
    let w: usize = parse_token(&mut r)?;
    let h: usize = parse_token(&mut r)?;
    let maxval: usize = parse_token(&mut r)?;
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported maxval {}", maxval)));
    }
    let mut bytes = vec![0u8; h * w * c];
    r.read_exact(&mut bytes)?;
    let data: Vec<f32> = bytes.iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::from_vec(&[h, w, c], data)
}

fn read_token<R: BufRead>(r: &mut R) -> Result<String> {
    let mut tok = String::new();
    loop {
        let mut byte = [0u8; 1];
        if r.read(&mut byte)? == 0 {
            if tok.is_empty() {
                return Err(Error::Format("unexpected end of file".into()));
            }
            return Ok(tok);
        }
        let ch = byte[0] as char;
        if ch == '#' {
            let mut junk = String::new();
            r.read_line(&mut junk)?;
            continue;
        }
        if ch.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            return Ok(tok);
        }
        tok.push(ch);
    }
}

fn parse_token<R: BufRead>(r: &mut R) -> Result<usize> {
    let tok = read_token(r)?;
    tok.parse()
        .map_err(|_| Error::Format(format!("bad header token {:?}", tok)))
}
