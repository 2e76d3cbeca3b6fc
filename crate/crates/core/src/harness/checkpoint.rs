//! Model checkpoints.
//!
//! Layout, little-endian: magic `GMVQ`, `u32` version, `u32` byte length and
//! the config text, the codebook section, then the encoder and decoder as a
//! `u32` layer count followed by weight and bias blocks. A block is a `u32`
//! rank, that many `u32` dims, then row-major f32 values.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::config::ModelConfig;
use super::model::{build_model, Model};
use super::nn::Mlp;
use crate::array::Array;
use crate::binio::{read_f32s, read_header, read_u32, to_u32, write_f32s, write_header, write_u32};
use crate::codebook::Codebook;
use crate::error::{Error, Result};

fn write_block(w: &mut impl Write, a: &Array) -> Result<()> {
    write_u32(w, to_u32(a.shape().len(), "rank")?)?;
    for &d in a.shape() {
        write_u32(w, to_u32(d, "dim")?)?;
    }
    write_f32s(w, a.data())
}

fn read_block(r: &mut impl Read, expect: &[usize]) -> Result<Array> {
    let rank = read_u32(r)? as usize;
    let shape = (0..rank)
        .map(|_| read_u32(r).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    if shape != expect {
        return Err(Error::Format(format!(
            "block shape {shape:?}, config implies {expect:?}"
        )));
    }
    let n = shape.iter().product();
    Array::new(&shape, read_f32s(r, n)?)
}

fn write_mlp(w: &mut impl Write, m: &Mlp) -> Result<()> {
    write_u32(w, to_u32(m.layers.len(), "layers")?)?;
    for l in &m.layers {
        write_block(w, &l.weight)?;
        write_block(w, &l.bias)?;
    }
    Ok(())
}

fn read_mlp(r: &mut impl Read, m: &mut Mlp) -> Result<()> {
    let n = read_u32(r)? as usize;
    if n != m.layers.len() {
        return Err(Error::Format(format!(
            "{n} layers, config implies {}",
            m.layers.len()
        )));
    }
    for l in &mut m.layers {
        l.weight = read_block(r, l.weight.shape())?;
        l.bias = read_block(r, l.bias.shape())?;
    }
    Ok(())
}

pub fn write_checkpoint(w: &mut impl Write, model: &Model) -> Result<()> {
    write_header(w)?;
    let text = model.config.to_text();
    write_u32(w, to_u32(text.len(), "config length")?)?;
    w.write_all(text.as_bytes())?;
    model.codebook.write_section(w)?;
    write_mlp(w, &model.encoder)?;
    write_mlp(w, &model.decoder)
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Model> {
    read_header(r)?;
    let len = read_u32(r)? as usize;
    let mut text = vec![0u8; len];
    r.read_exact(&mut text)?;
    let text =
        String::from_utf8(text).map_err(|_| Error::Format("config echo is not UTF-8".into()))?;
    let config = ModelConfig::parse_str(&text)?;
    let mut model = build_model(&config)?;
    let codebook = Codebook::read_section(r)?;
    if codebook.means().shape() != model.codebook.means().shape() {
        return Err(Error::Format("codebook shape disagrees with config".into()));
    }
    model.codebook = codebook;
    read_mlp(r, &mut model.encoder)?;
    read_mlp(r, &mut model.decoder)?;
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok(model)
}

/// Write to a sibling temporary file, sync, then rename over `path`.
pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    let name = path.file_name().ok_or_else(|| {
        Error::invalid(format!(
            "checkpoint path {} has no file name",
            path.display()
        ))
    })?;
    let tmp = path.with_file_name(format!(
        ".{}.tmp{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    let result = (|| {
        let mut w = BufWriter::new(File::create(&tmp)?);
        write_checkpoint(&mut w, model)?;
        let f = w.into_inner().map_err(|e| e.into_error())?;
        f.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}
