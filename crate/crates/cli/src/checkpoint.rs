//! Network checkpoints: 8-byte magic, u64 little-endian manifest length, a JSON
//! manifest, then every entry as little-endian f32 values in manifest order.
//! The standardization statistics travel as two extra frozen entries.

use std::fs;
use std::path::Path;

use rfrlf_core::diffcore::{Array, ParamSet};
use rfrlf_core::nn::Standardizer;
use rfrlf_core::rfsgpn::{Policy, PolicyArch};
use rfrlf_core::tspn::{Tspn, TspnArch};
use rfrlf_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RFRLCK01";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub enum Network {
    Tspn(Tspn),
    Policy(Policy),
}

impl Network {
    pub fn kind(&self) -> &'static str {
        match self {
            Network::Tspn(_) => "tspn",
            Network::Policy(_) => "policy",
        }
    }

    pub fn finalized(&self) -> bool {
        match self {
            Network::Tspn(t) => t.finalized,
            Network::Policy(p) => p.finalized,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub network: String,
    pub variant: String,
    pub norm: String,
    pub arch: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_g: Option<f64>,
    pub entries: Vec<Entry>,
    pub finalized: bool,
    pub config_hash: String,
    pub payload_sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn with_stats(params: &ParamSet, stats: &Standardizer) -> Result<ParamSet> {
    let mut all = params.clone();
    stats.to_params(&mut all)?;
    all.set_frozen("stats.mean", true)?;
    all.set_frozen("stats.std", true)?;
    Ok(all)
}

fn json_err(e: serde_json::Error) -> Error {
    Error::Format(e.to_string())
}

/// Serialize `net` to checkpoint bytes.
pub fn encode(net: &Network, config_hash: &str) -> Result<Vec<u8>> {
    let (params, variant, norm, arch, tau_g) = match net {
        Network::Tspn(t) => (
            with_stats(&t.params, &t.stats)?,
            serde_json::to_value(t.arch.variant).map_err(json_err)?,
            serde_json::to_value(t.arch.norm).map_err(json_err)?,
            serde_json::to_value(&t.arch).map_err(json_err)?,
            None,
        ),
        Network::Policy(p) => (
            with_stats(&p.params, &p.stats)?,
            serde_json::Value::String(if p.arch.state_shape.len() == 3 { "conv" } else { "mlp" }.into()),
            serde_json::Value::String("layer".into()),
            serde_json::to_value(&p.arch).map_err(json_err)?,
            Some(p.tau_g),
        ),
    };
    let mut payload = Vec::with_capacity(params.num_values() * 4);
    let mut entries = Vec::with_capacity(params.len());
    for (name, p) in params.iter() {
        for v in p.value.to_f32() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(Entry {
            name: name.to_string(),
            shape: p.value.shape().to_vec(),
            frozen: p.frozen,
        });
    }
    let as_str = |v: serde_json::Value| v.as_str().unwrap_or_default().to_string();
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        network: net.kind().into(),
        variant: as_str(variant),
        norm: as_str(norm),
        arch,
        tau_g,
        entries,
        finalized: net.finalized(),
        config_hash: config_hash.to_string(),
        payload_sha256: sha256_hex(&payload),
    };
    let json = serde_json::to_vec(&manifest).map_err(json_err)?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parse checkpoint bytes into the network and its manifest.
pub fn decode(bytes: &[u8]) -> Result<(Network, Manifest)> {
    if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    if bytes.len() < 16 {
        return Err(Error::Corruption("checkpoint header is truncated".into()));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() < mlen {
        return Err(Error::Corruption("checkpoint manifest is truncated".into()));
    }
    let m: Manifest = serde_json::from_slice(&body[..mlen]).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    if m.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {}", m.version)));
    }
    let payload = &body[mlen..];
    let expected: usize = m.entries.iter().map(|e| e.shape.iter().product::<usize>() * 4).sum();
    if payload.len() != expected {
        return Err(Error::Corruption(format!(
            "payload has {} bytes, manifest implies {expected}",
            payload.len()
        )));
    }
    if sha256_hex(payload) != m.payload_sha256 {
        return Err(Error::Corruption("payload hash mismatch".into()));
    }
    let mut params = ParamSet::new();
    let mut off = 0;
    for e in &m.entries {
        let n: usize = e.shape.iter().product();
        let vals: Vec<f32> = payload[off..off + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        off += 4 * n;
        params.insert(e.name.clone(), Array::from_f32(e.shape.clone(), &vals)?)?;
        params.set_frozen(&e.name, e.frozen)?;
    }
    let stats = Standardizer::from_params(&params)?;
    let mut net_params = ParamSet::new();
    for (name, p) in params.iter().filter(|(n, _)| !n.starts_with("stats.")) {
        net_params.insert(name.to_string(), p.value.clone())?;
        net_params.set_frozen(name, p.frozen)?;
    }
    let net = match m.network.as_str() {
        "tspn" => {
            let arch: TspnArch = serde_json::from_value(m.arch.clone()).map_err(json_err)?;
            let mut t = Tspn::init(arch, 0)?;
            t.params.check_compatible(&net_params)?;
            t.params = net_params;
            t.stats = stats;
            t.finalized = m.finalized;
            Network::Tspn(t)
        }
        "policy" => {
            let arch: PolicyArch = serde_json::from_value(m.arch.clone()).map_err(json_err)?;
            let mut p = Policy::init(arch, 0)?;
            p.params.check_compatible(&net_params)?;
            p.params = net_params;
            p.stats = stats;
            p.finalized = m.finalized;
            p.tau_g = m
                .tau_g
                .ok_or_else(|| Error::Format("policy checkpoint lacks tau_g".into()))?;
            Network::Policy(p)
        }
        other => return Err(Error::Format(format!("unknown network kind `{other}`"))),
    };
    Ok((net, m))
}

pub fn save(net: &Network, config_hash: &str, path: &Path) -> Result<String> {
    let bytes = encode(net, config_hash)?;
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn load(path: &Path) -> Result<(Network, Manifest)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn load_tspn(path: &Path) -> Result<Tspn> {
    match load(path)?.0 {
        Network::Tspn(t) => Ok(t),
        other => Err(Error::Format(format!("{} holds a {} network", path.display(), other.kind()))),
    }
}

pub fn load_policy(path: &Path) -> Result<Policy> {
    match load(path)?.0 {
        Network::Policy(p) => Ok(p),
        other => Err(Error::Format(format!("{} holds a {} network", path.display(), other.kind()))),
    }
}
