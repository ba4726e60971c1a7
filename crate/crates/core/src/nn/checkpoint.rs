//! Network checkpoints: a directory holding one tensor file per parameter and
//! a `manifest.txt` listing the configuration, the layer order with
//! hyperparameters, and the parameter files.
//!
//! ```text
//! model = resnet18
//! resolution = 32
//! ...
//! layer stem.conv conv in=3 out=16 kernel=3 stride=1 padding=1
//! param stem.conv.weight trainable stem.conv.weight.texp
//! ```

use std::fs;
use std::path::Path;

use super::resnet::{build_resnet18, Network, NetworkConfig};
use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor, DType};

pub const CHECKPOINT_MANIFEST: &str = "manifest.txt";

pub fn save_network(net: &Network, dir: impl AsRef<Path>, dtype: DType) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let cfg = net.config();
    let mut m = String::new();
    m.push_str("model = resnet18\n");
    m.push_str(&format!("resolution = {}\n", cfg.input_resolution));
    m.push_str(&format!("input_channels = {}\n", cfg.input_channels));
    m.push_str(&format!("class_count = {}\n", cfg.class_count));
    m.push_str(&format!("width_multiplier = {}\n", cfg.width_multiplier));
    m.push_str(&format!("head = {}\n", cfg.head));
    m.push_str(&format!("seed = {}\n", cfg.seed));
    m.push_str(&format!(
        "dtype = {}\n",
        match dtype {
            DType::F64 => "f64",
            DType::F32 => "f32",
        }
    ));
    for layer in net.layers() {
        m.push_str(&format!("layer {} {}\n", layer.name, layer.spec));
    }
    for p in net.params.iter() {
        let file = format!("{}.texp", p.name);
        write_tensor(dir.join(&file), &p.value, dtype)?;
        let kind = if p.trainable { "trainable" } else { "buffer" };
        m.push_str(&format!("param {} {kind} {file}\n", p.name));
    }
    fs::write(dir.join(CHECKPOINT_MANIFEST), m)?;
    Ok(())
}

/// Reads `key = value` settings from a checkpoint manifest.
pub(crate) fn manifest_setting<'a>(text: &'a str, key: &str) -> Option<&'a str> {
    text.lines().find_map(|l| {
        let (k, v) = l.split_once('=')?;
        (k.trim() == key && !l.starts_with("layer ") && !l.starts_with("param ")).then(|| v.trim())
    })
}

pub fn load_network(dir: impl AsRef<Path>) -> Result<Network> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join(CHECKPOINT_MANIFEST))?;
    let need = |key: &str| {
        manifest_setting(&text, key)
            .ok_or_else(|| Error::Checkpoint(format!("manifest lacks `{key}`")))
    };
    let model = need("model")?;
    if model != "resnet18" {
        return Err(Error::Checkpoint(format!("unsupported model `{model}`")));
    }
    let parse_err = |key: &str, e: String| Error::Checkpoint(format!("bad `{key}`: {e}"));
    let cfg = NetworkConfig {
        input_resolution: need("resolution")?
            .parse()
            .map_err(|e: std::num::ParseIntError| parse_err("resolution", e.to_string()))?,
        input_channels: need("input_channels")?
            .parse()
            .map_err(|e: std::num::ParseIntError| parse_err("input_channels", e.to_string()))?,
        class_count: need("class_count")?
            .parse()
            .map_err(|e: std::num::ParseIntError| parse_err("class_count", e.to_string()))?,
        width_multiplier: need("width_multiplier")?
            .parse()
            .map_err(|e: std::num::ParseFloatError| parse_err("width_multiplier", e.to_string()))?,
        head: need("head")?.parse().map_err(|e| parse_err("head", e))?,
        seed: need("seed")?
            .parse()
            .map_err(|e: std::num::ParseIntError| parse_err("seed", e.to_string()))?,
    };
    let mut net = build_resnet18(&cfg)?;

    let layers: Vec<&str> = text.lines().filter_map(|l| l.strip_prefix("layer ")).collect();
    let expected: Vec<String> = net
        .layers()
        .iter()
        .map(|l| format!("{} {}", l.name, l.spec))
        .collect();
    if layers != expected {
        return Err(Error::Checkpoint(
            "layer list does not match the configured topology".into(),
        ));
    }

    let mut seen = 0;
    for line in text.lines().filter_map(|l| l.strip_prefix("param ")) {
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [name, _kind, file] = fields[..] else {
            return Err(Error::Checkpoint(format!("malformed param line `{line}`")));
        };
        let (tensor, _) = read_tensor(dir.join(file))?;
        let slot = net.params.value_mut(name)?;
        if slot.shape() != tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "`{name}` has shape {:?}, expected {:?}",
                tensor.shape(),
                slot.shape()
            )));
        }
        *slot = tensor;
        seen += 1;
    }
    if seen != net.params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint lists {seen} of {} parameters",
            net.params.len()
        )));
    }
    Ok(net)
}
