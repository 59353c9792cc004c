//! On-disk artifacts: versioned JSON envelopes, a binary container for
//! bulk tensors, content hashing and run manifests.
//!
//! JSON artifacts look like `{"header": {...}, "payload": {...}}`. Binary
//! artifacts start with the line `HEADSHIFT-BIN`, then one line of header
//! JSON (carrying the payload length and its SHA-256), then the raw
//! little-endian payload.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const BINARY_MAGIC: &str = "HEADSHIFT-BIN";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArtifactKind {
    Model,
    Dataset,
    Taps,
    Probes,
    Headset,
    Shifts,
    Plan,
    Report,
    Sweep,
    Analysis,
}

impl ArtifactKind {
    pub fn name(self) -> &'static str {
        match self {
            ArtifactKind::Model => "model",
            ArtifactKind::Dataset => "dataset",
            ArtifactKind::Taps => "taps",
            ArtifactKind::Probes => "probes",
            ArtifactKind::Headset => "headset",
            ArtifactKind::Shifts => "shifts",
            ArtifactKind::Plan => "plan",
            ArtifactKind::Report => "report",
            ArtifactKind::Sweep => "sweep",
            ArtifactKind::Analysis => "analysis",
        }
    }
}

/// Content hashes of the artifacts an output was derived from, by role.
pub type Provenance = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactHeader {
    pub format_version: u32,
    pub kind: ArtifactKind,
    #[serde(default)]
    pub provenance: Provenance,
}

impl ArtifactHeader {
    pub fn new(kind: ArtifactKind, provenance: Provenance) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            kind,
            provenance,
        }
    }

    fn check(&self, kind: ArtifactKind, path: &Path) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "{}: format version {} (expected {FORMAT_VERSION})",
                path.display(),
                self.format_version
            )));
        }
        if self.kind != kind {
            return Err(Error::Format(format!(
                "{}: artifact kind {} (expected {})",
                path.display(),
                self.kind.name(),
                kind.name()
            )));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    header: ArtifactHeader,
    payload: T,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BinaryHeader {
    #[serde(flatten)]
    header: ArtifactHeader,
    meta: serde_json::Value,
    payload_bytes: usize,
    sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Content hash of a file, or of a directory tree (names, sizes and
/// bytes of every entry in sorted order).
pub fn hash_path(path: &Path) -> Result<String> {
    let meta = fs::metadata(path).map_err(|e| Error::io(path, e))?;
    if meta.is_file() {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        return Ok(sha256_hex(&bytes));
    }
    let mut hasher = Sha256::new();
    hash_tree(path, path, &mut hasher)?;
    Ok(hex::encode(hasher.finalize()))
}

fn hash_tree(root: &Path, dir: &Path, hasher: &mut Sha256) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    for p in entries {
        let rel = p.strip_prefix(root).unwrap_or(&p).to_string_lossy().replace('\\', "/");
        if p.is_dir() {
            hasher.update(format!("d {rel}\n").as_bytes());
            hash_tree(root, &p, hasher)?;
        } else {
            let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            hasher.update(format!("f {rel} {}\n", bytes.len()).as_bytes());
            hasher.update(&bytes);
        }
    }
    Ok(())
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Pretty JSON with a trailing newline.
pub fn to_json_bytes<T: Serialize + ?Sized>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("artifact types always serialize");
    bytes.push(b'\n');
    bytes
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    write_bytes(path, &to_json_bytes(value))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn save_json<T: Serialize>(
    path: &Path,
    kind: ArtifactKind,
    provenance: Provenance,
    payload: &T,
) -> Result<()> {
    write_json(
        path,
        &Envelope {
            header: ArtifactHeader::new(kind, provenance),
            payload,
        },
    )
}

pub fn load_json<T: DeserializeOwned>(path: &Path, kind: ArtifactKind) -> Result<(ArtifactHeader, T)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let raw: Envelope<serde_json::Value> = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    raw.header.check(kind, path)?;
    let payload = serde_json::from_value(raw.payload)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok((raw.header, payload))
}

pub fn encode_binary<M: Serialize>(header: &ArtifactHeader, meta: &M, payload: &[u8]) -> Vec<u8> {
    let head = BinaryHeader {
        header: header.clone(),
        meta: serde_json::to_value(meta).expect("metadata serializes"),
        payload_bytes: payload.len(),
        sha256: sha256_hex(payload),
    };
    let mut out = Vec::with_capacity(payload.len() + 256);
    out.extend_from_slice(BINARY_MAGIC.as_bytes());
    out.push(b'\n');
    out.extend(serde_json::to_vec(&head).expect("header serializes"));
    out.push(b'\n');
    out.extend_from_slice(payload);
    out
}

pub fn save_binary<M: Serialize>(
    path: &Path,
    header: &ArtifactHeader,
    meta: &M,
    payload: &[u8],
) -> Result<()> {
    write_bytes(path, &encode_binary(header, meta, payload))
}

/// Parse a binary artifact, checking magic, version, kind, length and hash.
pub fn decode_binary<M: DeserializeOwned>(
    bytes: &[u8],
    kind: ArtifactKind,
    path: &Path,
) -> Result<(ArtifactHeader, M, Vec<u8>)> {
    let bad = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));
    let magic_end = BINARY_MAGIC.len();
    if bytes.len() <= magic_end || &bytes[..magic_end] != BINARY_MAGIC.as_bytes() || bytes[magic_end] != b'\n' {
        return Err(bad("missing binary artifact magic"));
    }
    let rest = &bytes[magic_end + 1..];
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("truncated header"))?;
    let head: BinaryHeader =
        serde_json::from_slice(&rest[..nl]).map_err(|e| bad(&format!("corrupt header: {e}")))?;
    head.header.check(kind, path)?;
    let payload = &rest[nl + 1..];
    if payload.len() != head.payload_bytes {
        return Err(bad(&format!(
            "payload has {} bytes, header declares {}",
            payload.len(),
            head.payload_bytes
        )));
    }
    if sha256_hex(payload) != head.sha256 {
        return Err(bad("payload hash mismatch"));
    }
    let meta = serde_json::from_value(head.meta).map_err(|e| bad(&format!("corrupt metadata: {e}")))?;
    Ok((head.header, meta, payload.to_vec()))
}

pub fn load_binary<M: DeserializeOwned>(path: &Path, kind: ArtifactKind) -> Result<(ArtifactHeader, M, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_binary(&bytes, kind, path)
}

/// Record of one command invocation, written next to its output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub seed: Option<u64>,
    pub tool_version: String,
    pub timestamp: Option<String>,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seed: Option<u64>) -> Self {
        Self {
            command: command.to_string(),
            config,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            timestamp: None,
        }
    }

    /// `<output>.run.json` next to the output file or directory.
    pub fn path_for(output: &Path) -> std::path::PathBuf {
        let mut name = output
            .file_name()
            .map(|n| n.to_os_string())
            .unwrap_or_default();
        name.push(".run.json");
        output.with_file_name(name)
    }

    pub fn write(&self, output: &Path) -> Result<()> {
        write_json(&Self::path_for(output), self)
    }
}

/// Serde adapter storing `f32` values as their exact `f64` widening.
pub(crate) mod f32_exact {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[f32], s: S) -> Result<S::Ok, S::Error> {
        let wide: Vec<f64> = v.iter().map(|&x| f64::from(x)).collect();
        wide.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f32>, D::Error> {
        let wide = Vec::<f64>::deserialize(d)?;
        Ok(wide.into_iter().map(|x| x as f32).collect())
    }
}

/// Flush helper for line-oriented writers.
pub(crate) fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut buf = Vec::new();
    for l in lines {
        buf.write_all(l.as_bytes()).expect("vec write");
        buf.push(b'\n');
    }
    write_bytes(path, &buf)
}
