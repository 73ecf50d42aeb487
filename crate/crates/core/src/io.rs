//! File formats: model JSON, IDX datasets, CSV tensors/curves and PPM images.
//!
//! Model files are UTF-8 JSON with sorted keys and every float written with
//! 17 significant digits, so `load(save(net))` reproduces the parameters
//! bit-exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde_json::{Map, Number, Value};

use crate::error::{Error, Result};
use crate::eval::FlipCurve;
use crate::layers::{Layer, LayerKind, PoolSpec};
use crate::network::Network;
use crate::prototype::RbmExpert;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u64 = 1;

/// Everything a model file can carry.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelFile {
    pub network: Network,
    pub expert: Option<RbmExpert>,
    /// Input box `(low, high)` for the z^B rule.
    pub input_bounds: Option<(Tensor, Tensor)>,
}

impl ModelFile {
    pub fn new(network: Network) -> Self {
        ModelFile {
            network,
            expert: None,
            input_bounds: None,
        }
    }
}

pub fn save_model(model: &ModelFile, path: impl AsRef<Path>) -> Result<()> {
    write_file(path, model_to_json(model).as_bytes())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelFile> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    model_from_json(&text)
}

pub fn write_file(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn float(v: f64) -> Value {
    Value::Number(Number::from_f64(v).expect("model parameters are finite"))
}

fn uints(v: &[usize]) -> Value {
    Value::Array(v.iter().map(|&d| Value::from(d as u64)).collect())
}

/// Nested JSON arrays following the tensor's shape.
fn nested(t: &Tensor) -> Value {
    fn build(shape: &[usize], data: &[f64]) -> Value {
        if shape.len() == 1 {
            return Value::Array(data.iter().map(|&v| float(v)).collect());
        }
        let stride = data.len() / shape[0];
        Value::Array(
            data.chunks(stride)
                .map(|chunk| build(&shape[1..], chunk))
                .collect(),
        )
    }
    build(t.shape(), t.data())
}

fn layer_to_json(layer: &Layer) -> Value {
    let mut obj = Map::new();
    obj.insert("kind".into(), Value::from(layer.kind().name()));
    match layer {
        Layer::Dense { weights, bias } => {
            obj.insert("weights".into(), nested(weights));
            obj.insert("bias".into(), nested(bias));
        }
        Layer::Conv2D {
            weights,
            bias,
            stride,
            padding,
        } => {
            obj.insert("weights".into(), nested(weights));
            obj.insert("bias".into(), nested(bias));
            obj.insert("stride".into(), Value::from(*stride as u64));
            obj.insert("padding".into(), Value::from(*padding as u64));
        }
        Layer::SumPool(p) | Layer::AvgPool(p) | Layer::MaxPool(p) => {
            obj.insert("window".into(), uints(&p.window));
            obj.insert("stride".into(), Value::from(p.stride as u64));
        }
        Layer::ReLU | Layer::Flatten => {}
    }
    Value::Object(obj)
}

pub fn model_to_json(model: &ModelFile) -> String {
    let net = &model.network;
    let mut root = Map::new();
    root.insert("format_version".into(), Value::from(FORMAT_VERSION));
    root.insert("input_shape".into(), uints(net.input_shape()));
    root.insert("class_count".into(), Value::from(net.class_count() as u64));
    root.insert(
        "layers".into(),
        Value::Array(net.layers().iter().map(layer_to_json).collect()),
    );
    if let Some(expert) = &model.expert {
        let mut e = Map::new();
        e.insert(
            "factor_weights".into(),
            Value::Array(expert.factor_weights().iter().map(nested).collect()),
        );
        e.insert(
            "factor_biases".into(),
            Value::Array(expert.factor_biases().iter().map(|&b| float(b)).collect()),
        );
        e.insert("precision".into(), nested(expert.precision()));
        root.insert("expert".into(), Value::Object(e));
    }
    if let Some((low, high)) = &model.input_bounds {
        let mut b = Map::new();
        b.insert("low".into(), nested(low));
        b.insert("high".into(), nested(high));
        root.insert("input_bounds".into(), Value::Object(b));
    }
    let mut out = String::new();
    emit(&Value::Object(root), 0, &mut out);
    out.push('\n');
    out
}

/// Pretty printer: sorted keys (serde_json's default map is ordered), scalar
/// arrays on one line, floats with 17 significant digits.
fn emit(v: &Value, indent: usize, out: &mut String) {
    let pad = |n: usize| "  ".repeat(n);
    match v {
        Value::Object(map) => {
            if map.is_empty() {
                out.push_str("{}");
                return;
            }
            out.push_str("{\n");
            for (i, (k, val)) in map.iter().enumerate() {
                out.push_str(&pad(indent + 1));
                out.push_str(&Value::from(k.as_str()).to_string());
                out.push_str(": ");
                emit(val, indent + 1, out);
                out.push_str(if i + 1 < map.len() { ",\n" } else { "\n" });
            }
            out.push_str(&pad(indent));
            out.push('}');
        }
        Value::Array(items) => {
            let scalar = items.iter().all(|x| !x.is_array() && !x.is_object());
            if scalar {
                out.push('[');
                for (i, x) in items.iter().enumerate() {
                    if i > 0 {
                        out.push_str(", ");
                    }
                    emit(x, indent, out);
                }
                out.push(']');
            } else {
                out.push_str("[\n");
                for (i, x) in items.iter().enumerate() {
                    out.push_str(&pad(indent + 1));
                    emit(x, indent + 1, out);
                    out.push_str(if i + 1 < items.len() { ",\n" } else { "\n" });
                }
                out.push_str(&pad(indent));
                out.push(']');
            }
        }
        Value::Number(n) if n.is_f64() => {
            let _ = write!(out, "{:.16e}", n.as_f64().unwrap());
        }
        other => out.push_str(&other.to_string()),
    }
}

fn model_err(msg: impl Into<String>) -> Error {
    Error::Model(msg.into())
}

type Plain<T> = std::result::Result<T, String>;

fn field<'a>(obj: &'a Map<String, Value>, key: &str) -> Plain<&'a Value> {
    obj.get(key).ok_or_else(|| format!("missing field {key:?}"))
}

fn as_uint(v: &Value, key: &str) -> Plain<usize> {
    v.as_u64()
        .map(|u| u as usize)
        .ok_or_else(|| format!("{key:?} must be a non-negative integer"))
}

fn as_uints(v: &Value, key: &str) -> Plain<Vec<usize>> {
    v.as_array()
        .ok_or_else(|| format!("{key:?} must be an array of integers"))?
        .iter()
        .map(|x| as_uint(x, key))
        .collect()
}

fn uint_field(obj: &Map<String, Value>, key: &str) -> Plain<usize> {
    as_uint(field(obj, key)?, key)
}

/// Reads a rectangular nested array of numbers.
pub fn tensor_from_nested(v: &Value) -> std::result::Result<Tensor, String> {
    fn shape_of(v: &Value, shape: &mut Vec<usize>) -> std::result::Result<(), String> {
        match v {
            Value::Array(items) => {
                if items.is_empty() {
                    return Err("empty array".into());
                }
                shape.push(items.len());
                shape_of(&items[0], shape)
            }
            Value::Number(_) => Ok(()),
            other => Err(format!("expected a number, found {other}")),
        }
    }
    fn flatten(v: &Value, shape: &[usize], out: &mut Vec<f64>) -> std::result::Result<(), String> {
        match (v, shape.split_first()) {
            (Value::Number(n), None) => {
                out.push(n.as_f64().ok_or("number out of range")?);
                Ok(())
            }
            (Value::Array(items), Some((&len, rest))) if items.len() == len => {
                items.iter().try_for_each(|x| flatten(x, rest, out))
            }
            _ => Err("ragged nested array".into()),
        }
    }
    let mut shape = Vec::new();
    shape_of(v, &mut shape)?;
    if shape.is_empty() {
        return Err("expected an array".into());
    }
    let mut data = Vec::new();
    flatten(v, &shape, &mut data)?;
    Tensor::new(shape, data).map_err(|e| e.to_string())
}

fn layer_from_json(i: usize, v: &Value) -> Result<Layer> {
    let lerr = |m: String| Error::layer(i, m);
    let obj = v
        .as_object()
        .ok_or_else(|| Error::layer(i, "layer entry is not an object"))?;
    let kind_name = field(obj, "kind")
        .map_err(lerr)?
        .as_str()
        .ok_or_else(|| Error::layer(i, "\"kind\" must be a string"))?;
    let kind = LayerKind::from_name(kind_name).ok_or_else(|| Error::UnsupportedLayer {
        layer: i,
        kind: kind_name.to_string(),
    })?;
    let tensor = |key: &str| -> Result<Tensor> {
        tensor_from_nested(field(obj, key).map_err(lerr)?)
            .map_err(|m| Error::layer(i, format!("{key}: {m}")))
    };
    let pool = || -> Result<PoolSpec> {
        let window = as_uints(field(obj, "window").map_err(lerr)?, "window").map_err(lerr)?;
        let [h, w] = window[..] else {
            return Err(Error::layer(i, "pool window must have two extents"));
        };
        Ok(PoolSpec::new(
            [h, w],
            uint_field(obj, "stride").map_err(lerr)?,
        ))
    };
    Ok(match kind {
        LayerKind::Dense => Layer::dense(tensor("weights")?, tensor("bias")?),
        LayerKind::Conv2D => Layer::conv2d(
            tensor("weights")?,
            tensor("bias")?,
            uint_field(obj, "stride").map_err(lerr)?,
            uint_field(obj, "padding").map_err(lerr)?,
        ),
        LayerKind::ReLU => Layer::ReLU,
        LayerKind::Flatten => Layer::Flatten,
        LayerKind::SumPool => Layer::SumPool(pool()?),
        LayerKind::AvgPool => Layer::AvgPool(pool()?),
        LayerKind::MaxPool => Layer::MaxPool(pool()?),
    })
}

pub fn model_from_json(text: &str) -> Result<ModelFile> {
    let root: Value = serde_json::from_str(text)?;
    let obj = root
        .as_object()
        .ok_or_else(|| model_err("top level must be an object"))?;
    let version = uint_field(obj, "format_version").map_err(model_err)?;
    if version as u64 != FORMAT_VERSION {
        return Err(model_err(format!("unsupported format_version {version}")));
    }
    let input_shape = as_uints(field(obj, "input_shape").map_err(model_err)?, "input_shape")
        .map_err(model_err)?;
    let class_count = uint_field(obj, "class_count").map_err(model_err)?;
    let layers = field(obj, "layers")
        .map_err(model_err)?
        .as_array()
        .ok_or_else(|| model_err("\"layers\" must be an array"))?
        .iter()
        .enumerate()
        .map(|(i, v)| layer_from_json(i, v))
        .collect::<Result<Vec<_>>>()?;
    let network = Network::new(input_shape, class_count, layers)?;

    let expert = match obj.get("expert") {
        None | Some(Value::Null) => None,
        Some(e) => {
            let e = e
                .as_object()
                .ok_or_else(|| model_err("\"expert\" must be an object"))?;
            let weights = field(e, "factor_weights")
                .map_err(|m| model_err(format!("expert: {m}")))?
                .as_array()
                .ok_or_else(|| model_err("expert.factor_weights must be an array"))?
                .iter()
                .map(|w| {
                    tensor_from_nested(w)
                        .map_err(|m| model_err(format!("expert.factor_weights: {m}")))
                })
                .collect::<Result<Vec<_>>>()?;
            let biases = field(e, "factor_biases")
                .map_err(|m| model_err(format!("expert: {m}")))?
                .as_array()
                .ok_or_else(|| model_err("expert.factor_biases must be an array"))?
                .iter()
                .map(|b| {
                    b.as_f64()
                        .ok_or_else(|| model_err("expert.factor_biases: expected numbers"))
                })
                .collect::<Result<Vec<_>>>()?;
            let precision = tensor_from_nested(
                field(e, "precision").map_err(|m| model_err(format!("expert: {m}")))?,
            )
            .map_err(|m| model_err(format!("expert.precision: {m}")))?;
            Some(RbmExpert::new(weights, biases, precision)?)
        }
    };

    let input_bounds = match obj.get("input_bounds") {
        None | Some(Value::Null) => None,
        Some(b) => {
            let b = b
                .as_object()
                .ok_or_else(|| model_err("\"input_bounds\" must be an object"))?;
            let read = |key: &str| -> Result<Tensor> {
                let t = tensor_from_nested(
                    field(b, key).map_err(|m| model_err(format!("input_bounds: {m}")))?,
                )
                .map_err(|m| model_err(format!("input_bounds.{key}: {m}")))?;
                t.reshape(network.input_shape()).map_err(|_| {
                    model_err(format!("input_bounds.{key} does not match the input shape"))
                })
            };
            Some((read("low")?, read("high")?))
        }
    };
    Ok(ModelFile {
        network,
        expert,
        input_bounds,
    })
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq)]
pub enum IdxData {
    /// `count × rows × cols`, bytes rescaled to `[0, 1]`.
    Images(Tensor),
    Labels(Vec<u8>),
}

pub fn load_idx(path: impl AsRef<Path>) -> Result<IdxData> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_idx(&bytes)
}

/// Parses an unsigned-byte IDX file. Magic and dimensions are validated
/// before the payload is touched.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxData> {
    let word = |i: usize| -> Result<u32> {
        bytes
            .get(4 * i..4 * i + 4)
            .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
            .ok_or_else(|| Error::Idx("truncated header".into()))
    };
    let magic = word(0)?;
    let ndims = match magic {
        IDX_IMAGES_MAGIC => 3,
        IDX_LABELS_MAGIC => 1,
        other => return Err(Error::Idx(format!("unsupported magic 0x{other:08X}"))),
    };
    let dims = (1..=ndims)
        .map(|i| word(i).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Idx(format!("dimensions {dims:?} overflow")))?;
    let payload = &bytes[4 * (ndims + 1)..];
    if payload.len() != count {
        return Err(Error::Idx(format!(
            "dimensions {dims:?} need {count} payload bytes, file has {}",
            payload.len()
        )));
    }
    if magic == IDX_LABELS_MAGIC {
        return Ok(IdxData::Labels(payload.to_vec()));
    }
    let data = payload.iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok(IdxData::Images(
        Tensor::new(dims, data).map_err(|e| Error::Idx(e.to_string()))?,
    ))
}

pub fn load_images(path: impl AsRef<Path>) -> Result<Tensor> {
    match load_idx(path)? {
        IdxData::Images(t) => Ok(t),
        IdxData::Labels(_) => Err(Error::Idx("expected an image file, found labels".into())),
    }
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    match load_idx(path)? {
        IdxData::Labels(l) => Ok(l),
        IdxData::Images(_) => Err(Error::Idx("expected a label file, found images".into())),
    }
}

pub fn encode_idx_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let count = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for w in [IDX_IMAGES_MAGIC, count as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&w.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Splits an `n × …` batch into its samples, each with a leading channel
/// axis added (`rows × cols` images become `1 × rows × cols`).
pub fn unbatch_images(batch: &Tensor) -> Vec<Tensor> {
    let shape = batch.shape();
    let mut sample_shape = vec![1];
    sample_shape.extend_from_slice(&shape[1..]);
    let per: usize = shape[1..].iter().product();
    batch
        .data()
        .chunks(per)
        .map(|c| Tensor::new(sample_shape.clone(), c.to_vec()).unwrap())
        .collect()
}

/// Shortest text that parses back to the same `f64`: plain decimal for
/// moderate magnitudes, scientific notation for very small or large ones.
pub fn format_float(v: f64) -> String {
    let a = v.abs();
    if a == 0.0 || (1e-5..1e16).contains(&a) || !v.is_finite() {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

/// CSV rows over the trailing axis; values in shortest round-trip form.
pub fn tensor_to_csv(t: &Tensor) -> String {
    let width = *t.shape().last().unwrap();
    let mut out = String::new();
    for row in t.data().chunks(width) {
        let line: Vec<String> = row.iter().map(|&v| format_float(v)).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

/// Parses comma/whitespace separated numbers. Without an explicit shape the
/// result is `rows × cols` (or a vector for a single row).
pub fn tensor_from_csv(text: &str, shape: Option<&[usize]>) -> Result<Tensor> {
    let mut rows = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| Error::invalid(format!("not a number: {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let data: Vec<f64> = rows.concat();
    if data.is_empty() {
        return Err(Error::invalid("CSV holds no values"));
    }
    let shape = match shape {
        Some(s) => s.to_vec(),
        None if rows.len() == 1 => vec![data.len()],
        None => {
            let cols = rows[0].len();
            if rows.iter().any(|r| r.len() != cols) {
                return Err(Error::invalid("ragged CSV rows"));
            }
            vec![rows.len(), cols]
        }
    };
    Tensor::new(shape, data)
}

/// `step,value` rows preceded by a comment stating the AUC convention.
pub fn curve_to_csv(curve: &FlipCurve) -> String {
    let mut out = format!(
        "# auc={} (trapezoid over unit steps divided by step count)\nstep,value\n",
        format_float(curve.auc)
    );
    for (i, &v) in curve.values.iter().enumerate() {
        let _ = writeln!(out, "{i},{}", format_float(v));
    }
    out
}
