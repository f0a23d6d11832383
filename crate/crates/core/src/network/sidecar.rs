//! Weight sidecar: `weights.bin` holds little-endian f32 values, and
//! `weights.manifest.json` lists each tensor's name, shape and byte range.
//!
//! Cell tensors are named by canonical node position, so a network saved
//! from any internal numbering loads back identically.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{compile, CellTemplate, ConcreteNetwork, ConvParams, LayerOp, LayerParams, NetworkError, Origin, Skeleton};
use crate::arch::{
    canonical_order, canonicalize, parse_architecture, serialize_architecture, validate_architecture,
    ArchError, Architecture,
};
use crate::tensor::{BatchNormRecord, Kernel};

pub const WEIGHTS_SCHEMA: &str = "obfunas-weights/v1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
    pub byte_length: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightManifest {
    pub schema: String,
    pub tensors: Vec<WeightEntry>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Slot {
    Weight,
    Bias,
    Gamma,
    Beta,
    Mean,
    Var,
    Eps,
    Gates,
}

impl Slot {
    fn suffix(self) -> &'static str {
        match self {
            Slot::Weight => "weight",
            Slot::Bias => "bias",
            Slot::Gamma => "bn.gamma",
            Slot::Beta => "bn.beta",
            Slot::Mean => "bn.mean",
            Slot::Var => "bn.var",
            Slot::Eps => "bn.eps",
            Slot::Gates => "gates",
        }
    }
}

/// `(layer index, slot, tensor name, shape)` for every stored tensor.
fn layout(skel: &Skeleton) -> Vec<(usize, Slot, String, Vec<usize>)> {
    let mut out = Vec::new();
    for (i, l) in skel.layers.iter().enumerate() {
        let base = l.name();
        let mut push = |slot: Slot, shape: Vec<usize>| {
            out.push((i, slot, format!("{base}.{}", slot.suffix()), shape));
        };
        if let LayerOp::Conv(spec) = l.op {
            let oc = l.out_shape[0];
            push(Slot::Weight, vec![spec.kernel[0], spec.kernel[1], l.in_shape[0], oc]);
            if spec.bias {
                push(Slot::Bias, vec![oc]);
            }
            if spec.batchnorm {
                for s in [Slot::Gamma, Slot::Beta, Slot::Mean, Slot::Var] {
                    push(s, vec![oc]);
                }
                push(Slot::Eps, vec![1]);
            }
        }
        if matches!(l.origin, Origin::Cell { .. }) {
            push(Slot::Gates, vec![l.inputs.len()]);
        }
    }
    out
}

fn slot_values(p: &LayerParams, slot: Slot) -> Vec<f64> {
    let conv = p.conv.as_ref();
    let bn = conv.and_then(|c| c.bn.as_ref());
    match slot {
        Slot::Weight => conv.map(|c| c.weight.data().to_vec()),
        Slot::Bias => conv.and_then(|c| c.bias.clone()),
        Slot::Gamma => bn.map(|b| b.gamma.clone()),
        Slot::Beta => bn.map(|b| b.beta.clone()),
        Slot::Mean => bn.map(|b| b.mean.clone()),
        Slot::Var => bn.map(|b| b.var.clone()),
        Slot::Eps => bn.map(|b| vec![b.eps]),
        Slot::Gates => Some(p.gates.clone()),
    }
    .expect("layout only lists present tensors")
}

fn set_slot(p: &mut LayerParams, slot: Slot, values: Vec<f64>) {
    let conv = p.conv.as_mut();
    match slot {
        Slot::Gates => p.gates = values,
        Slot::Weight => conv.unwrap().weight.data_mut().copy_from_slice(&values),
        Slot::Bias => conv.unwrap().bias = Some(values),
        _ => {
            let bn = conv.unwrap().bn.as_mut().unwrap();
            match slot {
                Slot::Gamma => bn.gamma = values,
                Slot::Beta => bn.beta = values,
                Slot::Mean => bn.mean = values,
                Slot::Var => bn.var = values,
                Slot::Eps => bn.eps = values[0],
                _ => unreachable!(),
            }
        }
    }
}

fn empty_params(skel: &Skeleton) -> Vec<LayerParams> {
    skel.layers
        .iter()
        .map(|l| LayerParams {
            gates: vec![1.0; l.inputs.len()],
            conv: match l.op {
                LayerOp::Conv(spec) => {
                    let oc = l.out_shape[0];
                    Some(ConvParams {
                        weight: Kernel::zeros([spec.kernel[0], spec.kernel[1], l.in_shape[0], oc]),
                        bias: spec.bias.then(|| vec![0.0; oc]),
                        bn: spec.batchnorm.then(|| BatchNormRecord {
                            gamma: vec![0.0; oc],
                            beta: vec![0.0; oc],
                            mean: vec![0.0; oc],
                            var: vec![0.0; oc],
                            eps: 0.0,
                        }),
                    })
                }
                _ => None,
            },
        })
        .collect()
}

/// The same network with cell node ids replaced by canonical positions.
pub(crate) fn relabel_canonical(net: &ConcreteNetwork) -> ConcreteNetwork {
    let cell = net.template().to_cell();
    let order = canonical_order(&cell);
    let old_ids: Vec<usize> = order.iter().map(|&pos| net.template().nodes()[pos].id).collect();
    let arch = canonicalize(&net.architecture());
    let template = CellTemplate::from_cell(&arch.cell);
    let skeleton = compile(&arch.backbone, &template).expect("relabeling keeps shapes");
    let old_index: HashMap<Origin, usize> = net
        .layers()
        .iter()
        .enumerate()
        .map(|(i, l)| (l.origin, i))
        .collect();
    let params = skeleton
        .layers
        .iter()
        .map(|l| {
            let origin = match l.origin {
                Origin::Cell { stack, cell, node } => Origin::Cell {
                    stack,
                    cell,
                    node: old_ids[node],
                },
                o => o,
            };
            let mut p = net.params()[old_index[&origin]].clone();
            if let Origin::Cell { node, .. } = l.origin {
                let old_slots = &net.template().node(old_ids[node]).unwrap().inputs;
                let old_gates = p.gates.clone();
                p.gates = template.node(node).unwrap().inputs
                    .iter()
                    .map(|&s| old_gates[old_slots.iter().position(|&o| o == old_ids[s]).unwrap()])
                    .collect();
            }
            p
        })
        .collect();
    ConcreteNetwork { skeleton, params }
}

/// Canonical architecture document, weight bytes, and manifest.
pub fn export_weights(net: &ConcreteNetwork) -> Result<(String, Vec<u8>, WeightManifest), NetworkError> {
    let canon = relabel_canonical(net);
    let doc = serialize_architecture(&canon.architecture())?;
    let mut bytes = Vec::new();
    let mut tensors = Vec::new();
    for (li, slot, name, shape) in layout(&canon.skeleton) {
        let values = slot_values(&canon.params[li], slot);
        let offset = bytes.len() as u64;
        for v in &values {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        tensors.push(WeightEntry {
            name,
            shape,
            byte_offset: offset,
            byte_length: (values.len() * 4) as u64,
        });
    }
    Ok((
        doc,
        bytes,
        WeightManifest {
            schema: WEIGHTS_SCHEMA.to_string(),
            tensors,
        },
    ))
}

/// Rebuilds a network from its architecture and sidecar. Cell node ids are
/// the canonical positions of `arch`.
pub fn import_weights(
    arch: &Architecture,
    bytes: &[u8],
    manifest: &WeightManifest,
) -> Result<ConcreteNetwork, NetworkError> {
    let werr = |m: String| NetworkError::Weights(m);
    if manifest.schema != WEIGHTS_SCHEMA {
        return Err(werr(format!("schema must be \"{WEIGHTS_SCHEMA}\", found \"{}\"", manifest.schema)));
    }
    let report = validate_architecture(arch);
    if !report.ok {
        return Err(ArchError::Invalid(report).into());
    }
    let arch = canonicalize(arch);
    let skeleton = compile(&arch.backbone, &CellTemplate::from_cell(&arch.cell))?;
    let mut params = empty_params(&skeleton);
    let mut entries: HashMap<&str, &WeightEntry> = HashMap::new();
    for e in &manifest.tensors {
        if entries.insert(e.name.as_str(), e).is_some() {
            return Err(werr(format!("duplicate tensor {}", e.name)));
        }
    }
    let expected = layout(&skeleton);
    for (li, slot, name, shape) in &expected {
        let e = entries
            .remove(name.as_str())
            .ok_or_else(|| werr(format!("missing tensor {name}")))?;
        if &e.shape != shape {
            return Err(werr(format!("{name} has shape {:?}, expected {shape:?}", e.shape)));
        }
        let count: usize = shape.iter().product();
        if e.byte_length != 4 * count as u64 {
            return Err(werr(format!("{name}: byte_length {} for {count} values", e.byte_length)));
        }
        let start = usize::try_from(e.byte_offset).map_err(|_| werr(format!("{name}: offset too large")))?;
        let chunk = bytes
            .get(start..start + 4 * count)
            .ok_or_else(|| werr(format!("{name}: byte range past end of file ({} bytes)", bytes.len())))?;
        let values = chunk
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        set_slot(&mut params[*li], *slot, values);
    }
    if let Some(extra) = entries.keys().min() {
        return Err(werr(format!("unexpected tensor {extra}")));
    }
    ConcreteNetwork::new(skeleton, params)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> NetworkError + '_ {
    move |source| NetworkError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Manifest path paired with a weights file: `x.bin` -> `x.manifest.json`.
pub fn manifest_path(weights: &Path) -> PathBuf {
    weights.with_extension("manifest.json")
}

/// Writes `arch.json`, `weights.bin` and `weights.manifest.json` into `dir`.
pub fn save_network(net: &ConcreteNetwork, dir: &Path) -> Result<(), NetworkError> {
    let (doc, bytes, manifest) = export_weights(net)?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let write = |name: &str, data: &[u8]| {
        let p = dir.join(name);
        fs::write(&p, data).map_err(io_err(&p))
    };
    write("arch.json", format!("{doc}\n").as_bytes())?;
    write("weights.bin", &bytes)?;
    let value = serde_json::to_value(&manifest).expect("manifest serializes");
    let text = serde_json::to_string_pretty(&value).expect("json value serializes");
    write("weights.manifest.json", format!("{text}\n").as_bytes())
}

/// Reads an architecture file and a weights file with its manifest.
pub fn load_network_files(arch_path: &Path, weights_path: &Path) -> Result<ConcreteNetwork, NetworkError> {
    let text = fs::read_to_string(arch_path).map_err(io_err(arch_path))?;
    let arch = parse_architecture(&text)?;
    let bytes = fs::read(weights_path).map_err(io_err(weights_path))?;
    let mpath = manifest_path(weights_path);
    let mtext = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let manifest: WeightManifest = serde_json::from_str(&mtext)
        .map_err(|e| NetworkError::Weights(format!("{}: {e}", mpath.display())))?;
    import_weights(&arch, &bytes, &manifest)
}

/// Reads a directory written by [`save_network`].
pub fn load_network(dir: &Path) -> Result<ConcreteNetwork, NetworkError> {
    load_network_files(&dir.join("arch.json"), &dir.join("weights.bin"))
}
