//! Binary model container.
//!
//! ```text
//! "TPOSE\0"  u32 version  u32 header_len  header (JSON ModelConfig)
//! u32 param_count
//! per param: u32 name_len  name  u32 ndim  u64 dims[ndim]  f64 data[prod(dims)]
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 6] = b"TPOSE\0";
pub const VERSION: u32 = 1;

pub fn to_bytes<T: Scalar>(model: &Model<T>) -> Result<Vec<u8>> {
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&VERSION.to_le_bytes());
    let header = serde_json::to_vec(model.config())?;
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (name, t) in model.params().iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end =
            end.ok_or_else(|| Error::Format(format!("truncated checkpoint at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Model<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Format("not a model checkpoint".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version}, expected {VERSION}"
        )));
    }
    let header_len = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(header_len)?)
        .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let mut model = Model::<T>::build(config, 0)
        .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let count = r.u32()? as usize;
    if count != model.params().len() {
        return Err(Error::Format(format!(
            "checkpoint holds {count} tensors, config implies {}",
            model.params().len()
        )));
    }
    for id in model.params().ids().collect::<Vec<_>>() {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8_lossy(r.take(name_len)?).into_owned();
        if name != model.params().name(id) {
            return Err(Error::Format(format!(
                "expected tensor {}, found {name}",
                model.params().name(id)
            )));
        }
        let ndim = r.u32()? as usize;
        let dims = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let target = model.params_mut().get_mut(id);
        if dims != target.shape() {
            return Err(Error::Format(format!(
                "tensor {name} has shape {dims:?}, config implies {:?}",
                target.shape()
            )));
        }
        for v in target.data_mut() {
            *v = T::cast(r.f64()?);
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok(model)
}

pub fn save_model<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model)?)?;
    Ok(())
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<Model<T>> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn round_trip_is_bit_exact() {
        let model = Model::<f64>::build(ModelConfig::toy(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tpose");
        save_model(&model, &path).unwrap();
        let back: Model<f64> = load_model(&path).unwrap();
        assert_eq!(back.config(), model.config());
        assert_eq!(back.params(), model.params());
        let img = Tensor::from_fn(&[3, 64, 48], |i| ((i * 7) % 13) as f64 / 13.0);
        assert_eq!(
            back.forward(&img, false).unwrap().0,
            model.forward(&img, false).unwrap().0
        );
    }

    #[test]
    fn edited_keypoint_count_is_a_format_error() {
        let model = Model::<f64>::build(ModelConfig::toy(), 3).unwrap();
        let bytes = to_bytes(&model).unwrap();
        let text = String::from_utf8_lossy(&bytes[14..14 + 300]).into_owned();
        let at = 14 + text.find("\"K\":4").unwrap() + 4;
        let mut edited = bytes.clone();
        edited[at] = b'5';
        assert!(matches!(from_bytes::<f64>(&edited), Err(Error::Format(_))));
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let model = Model::<f64>::build(ModelConfig::toy(), 3).unwrap();
        let bytes = to_bytes(&model).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes::<f64>(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[6] = 9;
        assert!(matches!(from_bytes::<f64>(&bad), Err(Error::Format(_))));
        assert!(matches!(
            from_bytes::<f64>(&bytes[..bytes.len() - 3]),
            Err(Error::Format(_))
        ));
    }
}
