//! On-disk checkpoints: a text manifest with one `name dtype shape` line per
//! array and a little-endian binary blob holding the values in manifest
//! order.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::optim::AdamState;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const VALUES_FILE: &str = "values.bin";

#[derive(Clone, Debug, PartialEq)]
pub enum Array {
    F64(Tensor),
    U8 { shape: Vec<usize>, data: Vec<u8> },
    U64 { shape: Vec<usize>, data: Vec<u64> },
}

impl Array {
    fn dtype(&self) -> &'static str {
        match self {
            Array::F64(_) => "f64",
            Array::U8 { .. } => "u8",
            Array::U64 { .. } => "u64",
        }
    }

    fn shape(&self) -> &[usize] {
        match self {
            Array::F64(t) => t.shape(),
            Array::U8 { shape, .. } | Array::U64 { shape, .. } => shape,
        }
    }
}

fn format_shape(shape: &[usize]) -> String {
    if shape.is_empty() {
        "scalar".to_string()
    } else {
        shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
    }
}

fn parse_shape(text: &str) -> Result<Vec<usize>> {
    if text == "scalar" {
        return Ok(Vec::new());
    }
    text.split('x')
        .map(|d| d.parse::<usize>().map_err(|_| Error::Checkpoint(format!("bad shape `{text}`"))))
        .collect()
}

/// Ordered set of named arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, Array)>,
    index: HashMap<String, usize>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn push(&mut self, name: impl Into<String>, array: Array) -> Result<()> {
        let name = name.into();
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(Error::Checkpoint(format!("invalid array name `{name}`")));
        }
        if self.index.contains_key(&name) {
            return Err(Error::Checkpoint(format!("duplicate array `{name}`")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, array));
        Ok(())
    }

    pub fn push_f64(&mut self, name: impl Into<String>, t: &Tensor) -> Result<()> {
        self.push(name, Array::F64(t.clone()))
    }

    pub fn push_u64(&mut self, name: impl Into<String>, data: Vec<u64>) -> Result<()> {
        self.push(name, Array::U64 { shape: vec![data.len().max(1)], data: if data.is_empty() { vec![0] } else { data } })
    }

    pub fn get(&self, name: &str) -> Result<&Array> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| Error::Checkpoint(format!("missing array `{name}`")))
    }

    pub fn f64(&self, name: &str) -> Result<&Tensor> {
        match self.get(name)? {
            Array::F64(t) => Ok(t),
            other => Err(Error::Checkpoint(format!("`{name}` is {} not f64", other.dtype()))),
        }
    }

    pub fn u8(&self, name: &str) -> Result<&[u8]> {
        match self.get(name)? {
            Array::U8 { data, .. } => Ok(data),
            other => Err(Error::Checkpoint(format!("`{name}` is {} not u8", other.dtype()))),
        }
    }

    pub fn u64(&self, name: &str) -> Result<&[u64]> {
        match self.get(name)? {
            Array::U64 { data, .. } => Ok(data),
            other => Err(Error::Checkpoint(format!("`{name}` is {} not u64", other.dtype()))),
        }
    }

    pub fn push_store(&mut self, prefix: &str, store: &ParamStore) -> Result<()> {
        for (name, t) in store.iter() {
            self.push_f64(format!("{prefix}/{name}"), t)?;
        }
        Ok(())
    }

    /// Load every tensor of `store` from `prefix/<name>` entries.
    pub fn load_store(&self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        let names: Vec<String> = store.names().to_vec();
        let mut loaded = ParamStore::new();
        for name in &names {
            loaded.add(name.clone(), self.f64(&format!("{prefix}/{name}"))?.clone());
        }
        store.copy_from(&loaded).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn push_adam(&mut self, prefix: &str, state: &AdamState) -> Result<()> {
        self.push_u64(format!("{prefix}/step_count"), vec![state.step_count])?;
        self.push_f64(
            format!("{prefix}/hyper"),
            &Tensor::vector(vec![state.learning_rate, state.beta1, state.beta2, state.epsilon]),
        )?;
        for (i, (m, v)) in state.first_moment.iter().zip(&state.second_moment).enumerate() {
            self.push_f64(format!("{prefix}/m{i}"), m)?;
            self.push_f64(format!("{prefix}/v{i}"), v)?;
        }
        Ok(())
    }

    pub fn load_adam(&self, prefix: &str, state: &mut AdamState) -> Result<()> {
        state.step_count = self.u64(&format!("{prefix}/step_count"))?[0];
        let hyper = self.f64(&format!("{prefix}/hyper"))?.data().to_vec();
        if let [lr, b1, b2, eps] = hyper[..] {
            (state.learning_rate, state.beta1, state.beta2, state.epsilon) = (lr, b1, b2, eps);
        } else {
            return Err(Error::Checkpoint(format!("{prefix}/hyper must hold 4 values")));
        }
        for i in 0..state.first_moment.len() {
            let m = self.f64(&format!("{prefix}/m{i}"))?;
            let v = self.f64(&format!("{prefix}/v{i}"))?;
            if m.shape() != state.first_moment[i].shape() || v.shape() != state.second_moment[i].shape() {
                return Err(Error::Checkpoint(format!("{prefix}: moment {i} shape mismatch")));
            }
            state.first_moment[i] = m.clone();
            state.second_moment[i] = v.clone();
        }
        Ok(())
    }

    pub fn manifest(&self) -> String {
        let mut out = String::new();
        for (name, array) in &self.entries {
            out.push_str(&format!("{name} {} {}\n", array.dtype(), format_shape(array.shape())));
        }
        out
    }

    pub fn values_blob(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (_, array) in &self.entries {
            match array {
                Array::F64(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                Array::U8 { data, .. } => out.extend_from_slice(data),
                Array::U64 { data, .. } => data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_parts(manifest: &str, blob: &[u8]) -> Result<Self> {
        let mut ckpt = Checkpoint::new();
        let mut offset = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let end = offset.checked_add(n).filter(|&e| e <= blob.len());
            let Some(end) = end else {
                return Err(Error::Checkpoint("value blob is shorter than the manifest".into()));
            };
            let s = &blob[offset..end];
            offset = end;
            Ok(s)
        };
        for (lineno, line) in manifest.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [name, dtype, shape] = fields[..] else {
                return Err(Error::Checkpoint(format!("manifest line {}: expected `name dtype shape`", lineno + 1)));
            };
            let shape = parse_shape(shape)?;
            let numel: usize = shape.iter().product();
            let array = match dtype {
                "f64" => {
                    let bytes = take(numel * 8)?;
                    let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
                    Array::F64(Tensor::new(shape, data)?)
                }
                "u8" => Array::U8 { data: take(numel)?.to_vec(), shape },
                "u64" => {
                    let bytes = take(numel * 8)?;
                    let data = bytes.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
                    Array::U64 { shape, data }
                }
                other => return Err(Error::Checkpoint(format!("unknown dtype `{other}`"))),
            };
            ckpt.push(name, array)?;
        }
        if offset != blob.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes after the last array", blob.len() - offset)));
        }
        Ok(ckpt)
    }

    /// Writes `manifest.txt` and `values.bin` into `dir`, creating it.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let tmp_manifest = dir.join(format!("{MANIFEST_FILE}.tmp"));
        let tmp_values = dir.join(format!("{VALUES_FILE}.tmp"));
        fs::write(&tmp_values, self.values_blob())?;
        fs::write(&tmp_manifest, self.manifest())?;
        fs::rename(tmp_values, dir.join(VALUES_FILE))?;
        fs::rename(tmp_manifest, dir.join(MANIFEST_FILE))?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let manifest = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let blob = fs::read(dir.join(VALUES_FILE))?;
        Self::from_parts(&manifest, &blob)
    }
}
