//! Self-describing container of named numeric arrays.
//!
//! Datasets, checkpoints, rollout windows and predictions all share this
//! format. Everything is little-endian; arrays are stored row-major and in
//! name order, so two archives with equal contents are byte-identical.
//!
//! ```text
//! magic        8 bytes   b"IKNOARC\0"
//! version      u32       1
//! meta_len     u64       length of the metadata record in bytes
//! metadata     meta_len  UTF-8 JSON object, string -> string, keys sorted
//! n_arrays     u32
//! per array, sorted by name:
//!   name_len   u32
//!   name       name_len bytes, UTF-8
//!   dtype      u8        1 = f32, 2 = f64, 3 = u64
//!   rank       u8
//!   dims       rank x u64
//!   data       prod(dims) elements of dtype
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{IknoError, Result};

const MAGIC: &[u8; 8] = b"IKNOARC\0";
const VERSION: u32 = 1;

/// Element precision used when writing floating-point arrays.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Single,
    #[default]
    Double,
}

impl std::str::FromStr for Precision {
    type Err = IknoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" | "f32" => Ok(Precision::Single),
            "double" | "f64" => Ok(Precision::Double),
            other => Err(IknoError::Config(format!("unknown precision '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U64(Vec<u64>),
}

impl ArrayData {
    fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::U64(v) => v.len(),
        }
    }

    fn dtype_tag(&self) -> u8 {
        match self {
            ArrayData::F32(_) => 1,
            ArrayData::F64(_) => 2,
            ArrayData::U64(_) => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    pub metadata: BTreeMap<String, String>,
    arrays: BTreeMap<String, NamedArray>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        self.metadata.insert(key.into(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| IknoError::Format(format!("missing metadata key '{key}'")))
    }

    /// Parses a metadata value with `FromStr`.
    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.meta(key)?;
        raw.parse()
            .map_err(|_| IknoError::Format(format!("metadata key '{key}' has invalid value '{raw}'")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.arrays.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.get(name)
    }

    pub fn insert_raw(&mut self, name: impl Into<String>, array: NamedArray) -> Result<()> {
        let expected: usize = array.shape.iter().product();
        if expected != array.data.len() {
            return Err(IknoError::Shape(format!(
                "array shape {:?} holds {} elements, got {}",
                array.shape,
                expected,
                array.data.len()
            )));
        }
        self.arrays.insert(name.into(), array);
        Ok(())
    }

    pub fn insert_f64(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        data: &[f64],
        precision: Precision,
    ) -> Result<()> {
        let data = match precision {
            Precision::Double => ArrayData::F64(data.to_vec()),
            Precision::Single => ArrayData::F32(data.iter().map(|&v| v as f32).collect()),
        };
        self.insert_raw(
            name,
            NamedArray {
                shape: shape.to_vec(),
                data,
            },
        )
    }

    pub fn insert_array(
        &mut self,
        name: impl Into<String>,
        array: &ArrayD<f64>,
        precision: Precision,
    ) -> Result<()> {
        let data: Vec<f64> = array.iter().copied().collect();
        self.insert_f64(name, array.shape(), &data, precision)
    }

    pub fn insert_u64(&mut self, name: impl Into<String>, data: &[u64]) -> Result<()> {
        self.insert_raw(
            name,
            NamedArray {
                shape: vec![data.len()],
                data: ArrayData::U64(data.to_vec()),
            },
        )
    }

    /// Returns a floating-point array widened to f64.
    pub fn get_f64(&self, name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
        let arr = self.require(name)?;
        let data = match &arr.data {
            ArrayData::F64(v) => v.clone(),
            ArrayData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            ArrayData::U64(_) => {
                return Err(IknoError::Format(format!("array '{name}' is not floating point")))
            }
        };
        Ok((arr.shape.clone(), data))
    }

    pub fn array(&self, name: &str) -> Result<ArrayD<f64>> {
        let (shape, data) = self.get_f64(name)?;
        ArrayD::from_shape_vec(IxDyn(&shape), data)
            .map_err(|e| IknoError::Format(format!("array '{name}': {e}")))
    }

    pub fn get_u64(&self, name: &str) -> Result<Vec<u64>> {
        match &self.require(name)?.data {
            ArrayData::U64(v) => Ok(v.clone()),
            _ => Err(IknoError::Format(format!("array '{name}' is not u64"))),
        }
    }

    fn require(&self, name: &str) -> Result<&NamedArray> {
        self.arrays
            .get(name)
            .ok_or_else(|| IknoError::Format(format!("missing array '{name}'")))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        let meta = serde_json::to_string(&self.metadata)
            .map_err(|e| IknoError::Format(format!("metadata: {e}")))?;
        w.write_u64::<LittleEndian>(meta.len() as u64)?;
        w.write_all(meta.as_bytes())?;
        w.write_u32::<LittleEndian>(self.arrays.len() as u32)?;
        for (name, arr) in &self.arrays {
            w.write_u32::<LittleEndian>(name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            w.write_u8(arr.data.dtype_tag())?;
            w.write_u8(arr.shape.len() as u8)?;
            for &d in &arr.shape {
                w.write_u64::<LittleEndian>(d as u64)?;
            }
            match &arr.data {
                ArrayData::F32(v) => {
                    for &x in v {
                        w.write_f32::<LittleEndian>(x)?;
                    }
                }
                ArrayData::F64(v) => {
                    for &x in v {
                        w.write_f64::<LittleEndian>(x)?;
                    }
                }
                ArrayData::U64(v) => {
                    for &x in v {
                        w.write_u64::<LittleEndian>(x)?;
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(IknoError::Format("not an archive (bad magic)".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(IknoError::Format(format!("unsupported archive version {version}")));
        }
        let meta_len = r.read_u64::<LittleEndian>()? as usize;
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta)?;
        let metadata: BTreeMap<String, String> = serde_json::from_slice(&meta)
            .map_err(|e| IknoError::Format(format!("metadata: {e}")))?;
        let n = r.read_u32::<LittleEndian>()? as usize;
        let mut arrays = BTreeMap::new();
        for _ in 0..n {
            let name_len = r.read_u32::<LittleEndian>()? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| IknoError::Format("array name is not UTF-8".into()))?;
            let dtype = r.read_u8()?;
            let rank = r.read_u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.read_u64::<LittleEndian>()? as usize);
            }
            let count: usize = shape.iter().product();
            let data = match dtype {
                1 => {
                    let mut v = vec![0f32; count];
                    r.read_f32_into::<LittleEndian>(&mut v)?;
                    ArrayData::F32(v)
                }
                2 => {
                    let mut v = vec![0f64; count];
                    r.read_f64_into::<LittleEndian>(&mut v)?;
                    ArrayData::F64(v)
                }
                3 => {
                    let mut v = vec![0u64; count];
                    r.read_u64_into::<LittleEndian>(&mut v)?;
                    ArrayData::U64(v)
                }
                other => {
                    return Err(IknoError::Format(format!("unknown dtype tag {other}")));
                }
            };
            arrays.insert(name, NamedArray { shape, data });
        }
        Ok(Self { metadata, arrays })
    }

    /// Writes the archive, refusing to replace an existing file unless `overwrite`.
    pub fn save(&self, path: impl AsRef<Path>, overwrite: bool) -> Result<()> {
        let path = path.as_ref();
        if path.exists() && !overwrite {
            return Err(IknoError::PathExists(path.display().to_string()));
        }
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_everything() {
        let mut a = Archive::new();
        a.set_meta("task", "burgers1d");
        a.set_meta("dt", 0.1);
        a.insert_f64("u", &[2, 3], &[1.0, -2.5, 3.0, 1e-300, f64::MAX, 0.0], Precision::Double)
            .unwrap();
        a.insert_f64("s", &[2], &[0.5, 0.25], Precision::Single).unwrap();
        a.insert_u64("seed", &[1, 2, u64::MAX]).unwrap();

        let mut bytes = Vec::new();
        a.write_to(&mut bytes).unwrap();
        let b = Archive::read_from(bytes.as_slice()).unwrap();
        assert_eq!(a, b);
        assert_eq!(b.meta("task").unwrap(), "burgers1d");
        assert_eq!(b.meta_parse::<f64>("dt").unwrap(), 0.1);
        assert_eq!(b.array("u").unwrap().shape(), &[2, 3]);

        let mut again = Vec::new();
        b.write_to(&mut again).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn rejects_bad_magic_and_shape() {
        assert!(Archive::read_from(&b"NOTANARCHIVE...."[..]).is_err());
        let mut a = Archive::new();
        assert!(a.insert_f64("x", &[3], &[1.0, 2.0], Precision::Double).is_err());
    }

    #[test]
    fn save_refuses_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ikno");
        let a = Archive::new();
        a.save(&path, false).unwrap();
        assert!(matches!(a.save(&path, false), Err(IknoError::PathExists(_))));
        a.save(&path, true).unwrap();
    }
}
