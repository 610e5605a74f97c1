//! Binary checkpoint container. Little-endian throughout, magic "AGNM1".
//! Round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Classifier, Layer, Padding};

pub(crate) const MAGIC: &[u8; 5] = b"AGNM1";
pub(crate) const KIND_MODEL: u32 = 1;
pub(crate) const KIND_MAP: u32 = 2;

const TAG_CONV: u32 = 1;
const TAG_RELU: u32 = 2;
const TAG_MAXPOOL: u32 = 3;
const TAG_FLATTEN: u32 = 4;
const TAG_DENSE: u32 = 5;

pub(crate) fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_u32::<LittleEndian>(t.shape().len() as u32)?;
    for &d in t.shape() {
        w.write_u32::<LittleEndian>(d as u32)?;
    }
    for &v in t.data() {
        w.write_f32::<LittleEndian>(v)?;
    }
    Ok(())
}

pub(crate) fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let ndims = r.read_u32::<LittleEndian>()? as usize;
    if ndims > 8 {
        return Err(Error::Format(format!("implausible tensor rank {}", ndims)));
    }
    let mut shape = Vec::with_capacity(ndims);
    for _ in 0..ndims {
        shape.push(r.read_u32::<LittleEndian>()? as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(r.read_f32::<LittleEndian>()?);
    }
    Tensor::from_vec(&shape, data)
}

pub(crate) fn write_header<W: Write>(w: &mut W, kind: u32) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(kind)?;
    Ok(())
}

pub(crate) fn read_header<R: Read>(r: &mut R, expect_kind: u32) -> Result<()> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic, not an AGNM1 file".into()));
    }
    let kind = r.read_u32::<LittleEndian>()?;
    if kind != expect_kind {
        return Err(Error::Format(format!(
            "wrong record kind {} (expected {})",
            kind, expect_kind
        )));
    }
    Ok(())
}

pub fn save_model<P: AsRef<Path>>(path: P, model: &Classifier) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, KIND_MODEL)?;
    let (h, wd, c) = model.input_shape;
    for v in [h, wd, c, model.num_classes, model.layers.len()] {
        w.write_u32::<LittleEndian>(v as u32)?;
    }
    for layer in &model.layers {
        match layer {
            Layer::Conv2d {
                weight,
                bias,
                padding,
            } => {
                w.write_u32::<LittleEndian>(TAG_CONV)?;
                w.write_u32::<LittleEndian>(match padding {
                    Padding::Same => 0,
                    Padding::Valid => 1,
                })?;
                write_tensor(&mut w, weight)?;
                write_tensor(&mut w, bias)?;
            }
            Layer::ReLU => w.write_u32::<LittleEndian>(TAG_RELU)?,
            Layer::MaxPool2d => w.write_u32::<LittleEndian>(TAG_MAXPOOL)?,
            Layer::Flatten => w.write_u32::<LittleEndian>(TAG_FLATTEN)?,
            Layer::Dense { weight, bias } => {
                w.write_u32::<LittleEndian>(TAG_DENSE)?;
                write_tensor(&mut w, weight)?;
                write_tensor(&mut w, bias)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_model<P: AsRef<Path>>(path: P) -> Result<Classifier> {
    let mut r = BufReader::new(File::open(path)?);
    read_header(&mut r, KIND_MODEL)?;
    let h = r.read_u32::<LittleEndian>()? as usize;
    let w = r.read_u32::<LittleEndian>()? as usize;
    let c = r.read_u32::<LittleEndian>()? as usize;
    let num_classes = r.read_u32::<LittleEndian>()? as usize;
    let num_layers = r.read_u32::<LittleEndian>()? as usize;
    let mut layers = Vec::with_capacity(num_layers);
    for _ in 0..num_layers {
        let tag = r.read_u32::<LittleEndian>()?;
        layers.push(match tag {
            TAG_CONV => {
                let padding = match r.read_u32::<LittleEndian>()? {
                    0 => Padding::Same,
                    1 => Padding::Valid,
                    p => return Err(Error::Format(format!("bad padding tag {}", p))),
                };
                let weight = read_tensor(&mut r)?;
                let bias = read_tensor(&mut r)?;
                Layer::Conv2d {
                    weight,
                    bias,
                    padding,
                }
            }
            TAG_RELU => Layer::ReLU,
            TAG_MAXPOOL => Layer::MaxPool2d,
            TAG_FLATTEN => Layer::Flatten,
            TAG_DENSE => Layer::Dense {
                weight: read_tensor(&mut r)?,
                bias: read_tensor(&mut r)?,
            },
            t => return Err(Error::Format(format!("unknown layer tag {}", t))),
        });
    }
    let model = Classifier {
        layers,
        input_shape: (h, w, c),
        num_classes,
    };
    model.validate()?;
    Ok(model)
}
