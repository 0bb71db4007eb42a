use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::{param::NAMES, HvaeModel};
use crate::error::{Error, Result};
use crate::expr::Vocabulary;
use crate::nnmath::Matrix;

const MAGIC: &[u8; 4] = b"HVAE";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct JsonBlock {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct JsonModel {
    format_version: u32,
    hidden_dim: usize,
    latent_dim: usize,
    max_height: usize,
    /// `name<TAB>kind` lines, in one-hot order.
    vocabulary: Vec<String>,
    params: Vec<JsonBlock>,
}

fn read_u32<R: Read>(r: &mut R) -> Result<usize> {
    Ok(r.read_u32::<LittleEndian>()? as usize)
}

impl HvaeModel {
    /// Binary container: magic, version, dims, vocabulary text, then the
    /// parameter blocks as `rows, cols, f64 LE...` in slot order.
    pub fn write_binary<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        w.write_u32::<LittleEndian>(self.hidden_dim as u32)?;
        w.write_u32::<LittleEndian>(self.latent_dim as u32)?;
        w.write_u32::<LittleEndian>(self.max_height as u32)?;
        let vocab = self.vocab.to_text();
        w.write_u32::<LittleEndian>(vocab.len() as u32)?;
        w.write_all(vocab.as_bytes())?;
        w.write_u32::<LittleEndian>(self.params.len() as u32)?;
        for p in &self.params {
            w.write_u32::<LittleEndian>(p.rows as u32)?;
            w.write_u32::<LittleEndian>(p.cols as u32)?;
            for v in &p.data {
                w.write_f64::<LittleEndian>(*v)?;
            }
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not an HVAE model file".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported model format version {version}")));
        }
        let hidden = read_u32(r)?;
        let latent = read_u32(r)?;
        let max_height = read_u32(r)?;
        let vlen = read_u32(r)?;
        let mut vbytes = vec![0u8; vlen];
        r.read_exact(&mut vbytes)?;
        let vtext = String::from_utf8(vbytes).map_err(|_| Error::Format("vocabulary is not UTF-8".into()))?;
        let vocab = Vocabulary::from_text(&vtext)?;
        let count = read_u32(r)?;
        if count != NAMES.len() {
            return Err(Error::Format(format!("{count} parameter blocks")));
        }
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let rows = read_u32(r)?;
            let cols = read_u32(r)?;
            let mut data = vec![0.0; rows * cols];
            r.read_f64_into::<LittleEndian>(&mut data)?;
            params.push(Matrix::from_vec(rows, cols, data));
        }
        HvaeModel::from_parts(vocab, hidden, latent, max_height, params)
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = JsonModel {
            format_version: FORMAT_VERSION,
            hidden_dim: self.hidden_dim,
            latent_dim: self.latent_dim,
            max_height: self.max_height,
            vocabulary: self.vocab.to_text().lines().map(String::from).collect(),
            params: self
                .params
                .iter()
                .zip(NAMES)
                .map(|(p, name)| JsonBlock {
                    name: name.to_string(),
                    rows: p.rows,
                    cols: p.cols,
                    data: p.data.clone(),
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: JsonModel = serde_json::from_str(text)?;
        if doc.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported model format version {}",
                doc.format_version
            )));
        }
        let vocab = Vocabulary::from_text(&doc.vocabulary.join("\n"))?;
        let mut params = Vec::with_capacity(doc.params.len());
        for (i, b) in doc.params.into_iter().enumerate() {
            if NAMES.get(i) != Some(&b.name.as_str()) {
                return Err(Error::Format(format!("unexpected parameter block `{}`", b.name)));
            }
            if b.data.len() != b.rows * b.cols {
                return Err(Error::Format(format!("block `{}` has wrong length", b.name)));
            }
            params.push(Matrix::from_vec(b.rows, b.cols, b.data));
        }
        HvaeModel::from_parts(vocab, doc.hidden_dim, doc.latent_dim, doc.max_height, params)
    }

    /// Saves as JSON when the path ends in `.json`, binary otherwise.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if path.extension().is_some_and(|e| e == "json") {
            std::fs::write(path, self.to_json()?)?;
        } else {
            let mut buf = Vec::new();
            self.write_binary(&mut buf)?;
            std::fs::write(path, buf)?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)?;
        if bytes.starts_with(MAGIC) {
            Self::read_binary(&mut bytes.as_slice())
        } else {
            let text = String::from_utf8(bytes).map_err(|_| Error::Format("model file is neither binary nor JSON".into()))?;
            Self::from_json(&text)
        }
    }
}
