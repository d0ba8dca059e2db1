use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::seed::{self, Rng};

/// Named parameter tree of one network. Cloning is shallow: clones share
/// storage with the original, so optimizer updates are visible through every
/// clone. Use [`ModelWeights::deep_copy`] for an independent copy.
#[derive(Debug, Clone, Default)]
pub struct ModelWeights {
    params: BTreeMap<String, Var>,
}

impl ModelWeights {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Var) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(Var::as_tensor)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.params.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    pub fn dtype(&self) -> DType {
        self.params
            .values()
            .next()
            .map(|v| v.dtype())
            .unwrap_or(DType::F32)
    }

    /// Names and shapes, in name order.
    pub fn structure(&self) -> Vec<(String, Vec<usize>)> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), v.dims().to_vec()))
            .collect()
    }

    pub fn same_structure(&self, other: &ModelWeights) -> bool {
        self.structure() == other.structure()
    }

    pub fn ensure_same_structure(&self, other: &ModelWeights) -> Result<()> {
        if self.same_structure(other) {
            Ok(())
        } else {
            Err(Error::Shape("parameter trees differ".into()))
        }
    }

    pub fn deep_copy(&self) -> Result<Self> {
        let mut params = BTreeMap::new();
        for (k, v) in &self.params {
            params.insert(k.clone(), Var::from_tensor(&v.as_tensor().copy()?)?);
        }
        Ok(ModelWeights { params })
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let mut params = BTreeMap::new();
        for (k, v) in &self.params {
            params.insert(k.clone(), Var::from_tensor(&v.as_tensor().to_dtype(dtype)?.copy()?)?);
        }
        Ok(ModelWeights { params })
    }

    /// Parameters under `prefix`, with the prefix stripped. Shares storage.
    pub fn strip_prefix(&self, prefix: &str) -> Self {
        let params = self
            .params
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
            .collect();
        ModelWeights { params }
    }

    /// Copies values from `src` into parameters named `prefix + name`.
    pub fn load_from(&self, prefix: &str, src: &ModelWeights) -> Result<()> {
        for (name, value) in &src.params {
            let key = format!("{prefix}{name}");
            let dst = self
                .params
                .get(&key)
                .ok_or_else(|| Error::Config(format!("missing parameter `{key}`")))?;
            if dst.dims() != value.dims() {
                return Err(Error::Shape(format!(
                    "`{key}`: {:?} vs {:?}",
                    dst.dims(),
                    value.dims()
                )));
            }
            dst.set(&value.as_tensor().to_dtype(dst.dtype())?)?;
        }
        Ok(())
    }

    /// Bitwise equality of every parameter.
    pub fn bitwise_eq(&self, other: &ModelWeights) -> Result<bool> {
        if !self.same_structure(other) {
            return Ok(false);
        }
        for (a, b) in self.params.values().zip(other.params.values()) {
            let a = a.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            let b = b.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            if a.iter().zip(&b).any(|(x, y)| x.to_bits() != y.to_bits()) {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Every parameter flattened into one vector, in name order.
    pub fn flat_values(&self) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.param_count());
        for v in self.params.values() {
            out.extend(v.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?);
        }
        Ok(out)
    }
}

/// Seeded parameter initializer. Every module draws its parameters through one
/// of these so a network is a pure function of (config, seed).
pub struct Init {
    weights: ModelWeights,
    rng: Rng,
    dtype: DType,
}

impl Init {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Init {
            weights: ModelWeights::new(),
            rng: seed::rng(seed, "init", &[]),
            dtype,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn finish(self) -> ModelWeights {
        self.weights
    }

    fn push(&mut self, name: &str, data: Vec<f64>, shape: &[usize]) -> Result<String> {
        let t = Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(self.dtype)?;
        self.weights.insert(name, Var::from_tensor(&t)?)?;
        Ok(name.to_string())
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<String> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.push(name, data, shape)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<String> {
        let n: usize = shape.iter().product();
        let dist = Uniform::new_inclusive(-bound, bound).map_err(|e| Error::Config(e.to_string()))?;
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.push(name, data, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<String> {
        let n: usize = shape.iter().product();
        self.push(name, vec![value; n], shape)
    }
}

const FORMAT: &str = "avssl-checkpoint";
const VERSION: &str = "1";

/// Versioned container of named parameter groups plus the config that
/// produced them.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub step: usize,
    pub groups: BTreeMap<String, ModelWeights>,
}

impl Checkpoint {
    pub fn config_fingerprint(&self) -> String {
        seed::fingerprint_json(&self.config)
    }

    pub fn group(&self, name: &str) -> Result<&ModelWeights> {
        self.groups
            .get(name)
            .ok_or_else(|| Error::Config(format!("checkpoint has no `{name}` group")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut tensors: Vec<(String, Tensor)> = Vec::new();
        for (group, weights) in &self.groups {
            if group.contains('/') {
                return Err(Error::checkpoint(path, format!("group name `{group}` contains '/'")));
            }
            for (name, var) in weights.iter() {
                tensors.push((format!("{group}/{name}"), var.as_tensor().contiguous()?));
            }
        }
        let metadata = HashMap::from([
            ("format".to_string(), FORMAT.to_string()),
            ("version".to_string(), VERSION.to_string()),
            ("kind".to_string(), self.kind.clone()),
            ("step".to_string(), self.step.to_string()),
            ("config".to_string(), serde_json::to_string(&self.config)?),
            ("config_fingerprint".to_string(), self.config_fingerprint()),
        ]);
        let bytes = safetensors::serialize(tensors.iter().map(|(k, t)| (k.as_str(), t)), Some(metadata))
            .map_err(|e| Error::checkpoint(path, e.to_string()))?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Loads a checkpoint. When `expected_config` is given, refuses files
    /// produced by a different configuration.
    pub fn load(path: &Path, expected_config: Option<&serde_json::Value>) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let st = safetensors::SafeTensors::deserialize(&bytes)
            .map_err(|e| Error::checkpoint(path, e.to_string()))?;
        let (_, header) = safetensors::SafeTensors::read_metadata(&bytes)
            .map_err(|e| Error::checkpoint(path, e.to_string()))?;
        let meta = header
            .metadata()
            .clone()
            .ok_or_else(|| Error::checkpoint(path, "no metadata"))?;
        let field = |k: &str| {
            meta.get(k)
                .cloned()
                .ok_or_else(|| Error::checkpoint(path, format!("metadata lacks `{k}`")))
        };
        if field("format")? != FORMAT {
            return Err(Error::checkpoint(path, "not an avssl checkpoint"));
        }
        if field("version")? != VERSION {
            return Err(Error::checkpoint(path, format!("unsupported version {}", field("version")?)));
        }
        let config: serde_json::Value = serde_json::from_str(&field("config")?)?;
        if let Some(expected) = expected_config {
            if seed::fingerprint_json(expected) != seed::fingerprint_json(&config) {
                return Err(Error::checkpoint(path, "configuration mismatch"));
            }
        }
        let step = field("step")?
            .parse()
            .map_err(|_| Error::checkpoint(path, "bad step"))?;
        let mut groups: BTreeMap<String, ModelWeights> = BTreeMap::new();
        for (name, view) in st.tensors() {
            let (group, param) = name
                .split_once('/')
                .ok_or_else(|| Error::checkpoint(path, format!("tensor `{name}` has no group")))?;
            let dtype = match view.dtype() {
                safetensors::Dtype::F32 => DType::F32,
                safetensors::Dtype::F64 => DType::F64,
                other => return Err(Error::checkpoint(path, format!("unsupported dtype {other:?}"))),
            };
            let t = Tensor::from_raw_buffer(view.data(), dtype, view.shape(), &Device::Cpu)?;
            groups
                .entry(group.to_string())
                .or_default()
                .insert(param, Var::from_tensor(&t)?)?;
        }
        Ok(Checkpoint {
            kind: field("kind")?,
            config,
            step,
            groups,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> ModelWeights {
        let mut init = Init::new(3, DType::F32);
        init.normal("a.weight", &[2, 3], 1.0).unwrap();
        init.constant("a.bias", &[2], 0.5).unwrap();
        init.finish()
    }

    #[test]
    fn init_is_seeded() {
        assert!(toy().bitwise_eq(&toy()).unwrap());
        let mut other = Init::new(4, DType::F32);
        other.normal("a.weight", &[2, 3], 1.0).unwrap();
        other.constant("a.bias", &[2], 0.5).unwrap();
        assert!(!toy().bitwise_eq(&other.finish()).unwrap());
    }

    #[test]
    fn deep_copy_is_independent() {
        let w = toy();
        let c = w.deep_copy().unwrap();
        assert!(c.bitwise_eq(&w).unwrap());
        w.var("a.bias").unwrap().set(&Tensor::new(&[9f32, 9.], &Device::Cpu).unwrap()).unwrap();
        assert!(!c.bitwise_eq(&w).unwrap());
        assert_eq!(c.get("a.bias").unwrap().to_vec1::<f32>().unwrap(), vec![0.5, 0.5]);
        let cc = c.deep_copy().unwrap();
        assert!(cc.bitwise_eq(&c).unwrap());
        assert_eq!(cc.names().collect::<Vec<_>>(), w.names().collect::<Vec<_>>());
    }

    #[test]
    fn checkpoint_round_trip_and_config_guard() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.safetensors");
        let config = serde_json::json!({"dim": 4});
        let ck = Checkpoint {
            kind: "test".into(),
            config: config.clone(),
            step: 7,
            groups: BTreeMap::from([("student".to_string(), toy())]),
        };
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path, Some(&config)).unwrap();
        assert_eq!(back.step, 7);
        assert_eq!(back.kind, "test");
        assert!(back.group("student").unwrap().bitwise_eq(&toy()).unwrap());
        let other = serde_json::json!({"dim": 5});
        assert!(Checkpoint::load(&path, Some(&other)).is_err());
    }
}
