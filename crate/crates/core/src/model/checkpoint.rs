//! Checkpoint directories: one tensor file per parameter plus `manifest.txt`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{LayerAddress, UNet, UNetConfig};
use crate::error::{Error, Result};
use crate::tensor::{read_tensor_file, write_tensor_file, Real};

const MAGIC: &str = "SVDDIPCKPT1";
const MANIFEST: &str = "manifest.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub file: String,
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub config: UNetConfig,
    pub config_hash: String,
    /// Factorized layers with their rank and singular values at replacement.
    pub svd_layers: Vec<(LayerAddress, usize, Vec<f64>)>,
    pub params: Vec<ParamEntry>,
}

impl Manifest {
    fn to_text(&self) -> String {
        let mut s = format!("{MAGIC}\nconfig_hash {}\nconfig {}\n", self.config_hash, self.config.to_text());
        for (a, rank, init) in &self.svd_layers {
            let vals: Vec<String> = init.iter().map(f64::to_string).collect();
            let _ = writeln!(s, "svd {a} {rank} {}", vals.join(","));
        }
        for p in &self.params {
            let shape: Vec<String> = p.shape.iter().map(usize::to_string).collect();
            let _ = writeln!(s, "param {} {} {} {}", p.file, p.name, shape.join(","), u8::from(p.trainable));
        }
        s
    }

    fn from_text(text: &str) -> Result<Self> {
        let bad = |d: String| Error::format("checkpoint manifest", d);
        let mut lines = text.lines();
        if lines.next() != Some(MAGIC) {
            return Err(bad("missing header".into()));
        }
        let mut config = None;
        let mut config_hash = None;
        let mut svd_layers = Vec::new();
        let mut params = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let (key, rest) = line.split_once(' ').ok_or_else(|| bad(format!("bad line {line:?}")))?;
            match key {
                "config_hash" => config_hash = Some(rest.to_string()),
                "config" => config = Some(UNetConfig::from_text(rest)?),
                "svd" => {
                    let f: Vec<&str> = rest.split(' ').collect();
                    let [addr, rank, vals] = f.as_slice() else {
                        return Err(bad(format!("bad svd line {line:?}")));
                    };
                    let rank = rank.parse().map_err(|_| bad(format!("bad rank in {line:?}")))?;
                    let vals = vals
                        .split(',')
                        .filter(|v| !v.is_empty())
                        .map(|v| v.parse::<f64>().map_err(|_| bad(format!("bad value {v:?}"))))
                        .collect::<Result<_>>()?;
                    svd_layers.push((LayerAddress::parse(addr)?, rank, vals));
                }
                "param" => {
                    let f: Vec<&str> = rest.split(' ').collect();
                    let [file, name, shape, trainable] = f.as_slice() else {
                        return Err(bad(format!("bad param line {line:?}")));
                    };
                    let shape = shape
                        .split(',')
                        .map(|d| d.parse().map_err(|_| bad(format!("bad shape in {line:?}"))))
                        .collect::<Result<_>>()?;
                    params.push(ParamEntry {
                        file: file.to_string(),
                        name: name.to_string(),
                        shape,
                        trainable: *trainable == "1",
                    });
                }
                _ => return Err(bad(format!("unknown key {key:?}"))),
            }
        }
        let config = config.ok_or_else(|| bad("missing config".into()))?;
        let config_hash = config_hash.ok_or_else(|| bad("missing config_hash".into()))?;
        if config.hash() != config_hash {
            return Err(bad(format!("config hash {config_hash} does not match config")));
        }
        Ok(Self {
            config,
            config_hash,
            svd_layers,
            params,
        })
    }
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let path = dir.as_ref().join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Manifest::from_text(&text)
}

/// Writes the network to `dir`, replacing any previous checkpoint there only
/// once the new one is complete.
pub fn save_checkpoint<T: Real>(net: &UNet<T>, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let staging = PathBuf::from(format!("{}.partial", dir.display()));
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    let mut params = Vec::new();
    for (id, p) in net.params().iter() {
        let file = format!("p{:03}.tensor", id.index());
        write_tensor_file(staging.join(&file), p.value())?;
        params.push(ParamEntry {
            file,
            name: p.name().to_string(),
            shape: p.value().shape().to_vec(),
            trainable: p.trainable(),
        });
    }
    let svd_layers = net
        .factorized_layers()
        .into_iter()
        .map(|(a, rank)| {
            let init = net.singular_values(a).map(|t| t.initial).unwrap_or_default();
            (a, rank, init)
        })
        .collect();
    let manifest = Manifest {
        config: net.config().clone(),
        config_hash: net.config().hash(),
        svd_layers,
        params,
    };
    let mpath = staging.join(MANIFEST);
    fs::write(&mpath, manifest.to_text()).map_err(|e| Error::io(&mpath, e))?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&staging, dir).map_err(|e| Error::io(dir, e))
}

/// Loads a checkpoint, converting values to `T`.
pub fn load_checkpoint<T: Real>(dir: impl AsRef<Path>) -> Result<UNet<T>> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let mut net = UNet::<T>::build(&manifest.config, 0)?;
    for (addr, rank, init) in &manifest.svd_layers {
        net.install_svd(*addr, *rank)?;
        net.set_initial_s(*addr, init.clone());
    }
    if manifest.params.len() != net.params().len() {
        return Err(Error::format(
            "checkpoint manifest",
            format!("{} parameters listed, network has {}", manifest.params.len(), net.params().len()),
        ));
    }
    for entry in &manifest.params {
        let id = net.params().find(&entry.name).ok_or_else(|| {
            Error::format("checkpoint manifest", format!("unknown parameter {}", entry.name))
        })?;
        let value = read_tensor_file(dir.join(&entry.file))?.into_tensor::<T>();
        if value.shape() != net.params().get(id).value().shape() || value.shape() != entry.shape.as_slice() {
            return Err(Error::format(
                "checkpoint",
                format!("parameter {} has shape {:?}", entry.name, value.shape()),
            ));
        }
        let p = net.params_mut().get_mut(id);
        p.set_value(value)?;
        p.set_trainable(entry.trainable);
    }
    Ok(net)
}
