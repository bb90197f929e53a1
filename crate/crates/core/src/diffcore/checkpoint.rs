//! JSON checkpoints: one document mapping dotted parameter names to
//! `{shape, values}`, the optimizer under `__adam__` and an optional
//! embedded configuration under `__config__`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::adam::AdamState;
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const ADAM_KEY: &str = "__adam__";
pub const CONFIG_KEY: &str = "__config__";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    shape: Vec<usize>,
    values: Vec<f64>,
    #[serde(default = "default_true")]
    trainable: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Serialize, Deserialize)]
struct AdamEntry {
    #[serde(flatten)]
    hyper: AdamState,
    m: Map<String, Value>,
    v: Map<String, Value>,
}

/// Contents of a loaded checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub adam: Option<AdamState>,
    pub config: Option<Value>,
}

impl Checkpoint {
    /// Copies optimizer moments into an [`AdamState`] laid out like `target`.
    pub fn adam_for(&self, target: &ParamStore) -> Option<AdamState> {
        let src = self.adam.as_ref()?;
        let mut st = src.clone();
        let mut m = Vec::with_capacity(target.len());
        let mut v = Vec::with_capacity(target.len());
        for id in target.ids() {
            let name = target.name(id);
            let from = self.params.id(name);
            m.push(from.and_then(|f| src.m.get(f.index()).cloned()).unwrap_or_default());
            v.push(from.and_then(|f| src.v.get(f.index()).cloned()).unwrap_or_default());
        }
        st.set_moments(m, v);
        Some(st)
    }
}

pub fn checkpoint_to_json(store: &ParamStore, adam: Option<&AdamState>, config: Option<&Value>) -> Value {
    let mut doc = Map::new();
    for (name, t) in store.iter() {
        let entry = TensorEntry {
            shape: t.shape().to_vec(),
            values: t.data().to_vec(),
            trainable: t.requires_grad(),
        };
        doc.insert(name.to_owned(), serde_json::to_value(entry).expect("plain data"));
    }
    if let Some(st) = adam {
        let mut m = Map::new();
        let mut v = Map::new();
        for id in store.trainable() {
            let i = id.index();
            if let (Some(mi), Some(vi)) = (st.first_moment(i), st.second_moment(i)) {
                if !mi.is_empty() {
                    m.insert(store.name(id).to_owned(), Value::from(mi.to_vec()));
                    v.insert(store.name(id).to_owned(), Value::from(vi.to_vec()));
                }
            }
        }
        let entry = AdamEntry {
            hyper: st.clone(),
            m,
            v,
        };
        doc.insert(ADAM_KEY.to_owned(), serde_json::to_value(entry).expect("plain data"));
    }
    if let Some(cfg) = config {
        doc.insert(CONFIG_KEY.to_owned(), cfg.clone());
    }
    Value::Object(doc)
}

pub fn checkpoint_from_json(doc: &Value) -> Result<Checkpoint> {
    let obj = doc
        .as_object()
        .ok_or_else(|| Error::parse("<root>", "checkpoint must be a JSON object"))?;
    let mut params = ParamStore::new();
    for (name, val) in obj {
        if name == ADAM_KEY || name == CONFIG_KEY {
            continue;
        }
        let entry: TensorEntry =
            serde_json::from_value(val.clone()).map_err(|e| Error::parse(name.clone(), e.to_string()))?;
        let t = Tensor::new(entry.shape, entry.values).map_err(|e| Error::parse(name.clone(), e.to_string()))?;
        if entry.trainable {
            params.add_param(name, t)?;
        } else {
            params.add_buffer(name, t)?;
        }
    }
    let adam = match obj.get(ADAM_KEY) {
        None => None,
        Some(v) => {
            let entry: AdamEntry =
                serde_json::from_value(v.clone()).map_err(|e| Error::parse(ADAM_KEY, e.to_string()))?;
            let mut st = entry.hyper;
            let mut m = Vec::with_capacity(params.len());
            let mut vv = Vec::with_capacity(params.len());
            for id in params.ids() {
                let name = params.name(id);
                m.push(moment(&entry.m, name, params.get(id).numel())?);
                vv.push(moment(&entry.v, name, params.get(id).numel())?);
            }
            st.set_moments(m, vv);
            Some(st)
        }
    };
    Ok(Checkpoint {
        params,
        adam,
        config: obj.get(CONFIG_KEY).cloned(),
    })
}

fn moment(map: &Map<String, Value>, name: &str, numel: usize) -> Result<Vec<f64>> {
    match map.get(name) {
        None => Ok(Vec::new()),
        Some(v) => {
            let vals: Vec<f64> = serde_json::from_value(v.clone())
                .map_err(|e| Error::parse(format!("{ADAM_KEY}.{name}"), e.to_string()))?;
            if vals.len() != numel {
                return Err(Error::parse(
                    format!("{ADAM_KEY}.{name}"),
                    format!("{} moment values for {numel} parameters", vals.len()),
                ));
            }
            Ok(vals)
        }
    }
}

pub fn save_checkpoint(
    path: &Path,
    store: &ParamStore,
    adam: Option<&AdamState>,
    config: Option<&Value>,
) -> Result<()> {
    let doc = checkpoint_to_json(store, adam, config);
    let bytes = serde_json::to_vec(&doc).expect("JSON values serialize");
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let doc: Value = serde_json::from_slice(&bytes).map_err(|e| Error::data(path, e.to_string()))?;
    checkpoint_from_json(&doc)
}
