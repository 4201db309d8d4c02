//! Safetensors archives of named f32 tensors with the resolved configuration
//! embedded as JSON metadata.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::error::{Error, Result};

pub const CONFIG_KEY: &str = "config";

/// Writes `tensors` and `metadata` to `path`.
pub fn save_tensors(
    path: &Path,
    tensors: &BTreeMap<String, Tensor>,
    metadata: HashMap<String, String>,
) -> Result<()> {
    let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = tensors
        .iter()
        .map(|(name, t)| {
            let data: Vec<u8> = t
                .flatten_all()?
                .to_vec1::<f32>()?
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect();
            Ok((name.clone(), t.dims().to_vec(), data))
        })
        .collect::<Result<_>>()?;
    let views = bytes
        .iter()
        .map(|(name, shape, data)| {
            TensorView::new(Dtype::F32, shape.clone(), data)
                .map(|v| (name.as_str(), v))
                .map_err(|e| Error::checkpoint(path, e))
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    safetensors::serialize_to_file(views, Some(metadata), path).map_err(|e| Error::checkpoint(path, e))
}

/// Reads every tensor and the metadata map.
pub fn load_tensors(path: &Path) -> Result<(BTreeMap<String, Tensor>, HashMap<String, String>)> {
    let buf = std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let (_, meta) = SafeTensors::read_metadata(&buf).map_err(|e| Error::checkpoint(path, e))?;
    let metadata = meta.metadata().clone().unwrap_or_default();
    let st = SafeTensors::deserialize(&buf).map_err(|e| Error::checkpoint(path, e))?;
    let mut out = BTreeMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F32 {
            return Err(Error::checkpoint(path, format!("{name}: expected f32, found {:?}", view.dtype())));
        }
        let data: Vec<f32> = view
            .data()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.insert(name, Tensor::from_vec(data, view.shape(), &Device::Cpu)?);
    }
    Ok((out, metadata))
}

/// Parameter archive plus the configuration JSON it was trained with.
pub fn save_checkpoint(path: &Path, tensors: &BTreeMap<String, Tensor>, config_json: &str) -> Result<()> {
    let meta = HashMap::from([(CONFIG_KEY.to_string(), config_json.to_string())]);
    save_tensors(path, tensors, meta)
}

pub fn load_checkpoint(path: &Path) -> Result<(BTreeMap<String, Tensor>, String)> {
    let (tensors, mut meta) = load_tensors(path)?;
    let cfg = meta
        .remove(CONFIG_KEY)
        .ok_or_else(|| Error::checkpoint(path, "no embedded configuration"))?;
    Ok((tensors, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a/ckpt.safetensors");
        let mut m = BTreeMap::new();
        m.insert("x.w".to_string(), Tensor::randn(0f32, 1.0, (3, 4), &Device::Cpu).unwrap());
        m.insert("y".to_string(), Tensor::new(&[f32::MIN_POSITIVE, -0.0, 1e30], &Device::Cpu).unwrap());
        save_checkpoint(&path, &m, r#"{"a":1}"#).unwrap();
        let (back, cfg) = load_checkpoint(&path).unwrap();
        assert_eq!(cfg, r#"{"a":1}"#);
        for (k, v) in &m {
            let a: Vec<u32> = v.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().map(|f| f.to_bits()).collect();
            let b: Vec<u32> = back[k].flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().map(|f| f.to_bits()).collect();
            assert_eq!(a, b);
            assert_eq!(v.dims(), back[k].dims());
        }
    }

    #[test]
    fn missing_config_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.safetensors");
        save_tensors(&path, &BTreeMap::new(), HashMap::new()).unwrap();
        assert!(load_checkpoint(&path).is_err());
        assert!(load_checkpoint(&dir.path().join("nope")).is_err());
    }
}
