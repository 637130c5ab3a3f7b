//! Heterogeneous cluster description.
//!
//! A cluster is an ordered list of homogeneous [`DeviceMesh`]es. Inside a mesh,
//! intra-op parallelism runs on rectangular [`Submesh`] slices; pipeline stages
//! consume meshes in cluster order.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ClusterError {
    #[error("cluster has no meshes")]
    Empty,
    #[error("mesh `{mesh}`: {reason}")]
    InvalidMesh { mesh: String, reason: String },
    #[error("duplicate mesh id `{0}`")]
    DuplicateMesh(String),
    #[error("unknown mesh `{0}`")]
    UnknownMesh(String),
    #[error("invalid bandwidth `{0}`")]
    Bandwidth(String),
    #[error("cross bandwidth must be positive")]
    CrossBandwidth,
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parsing cluster spec: {0}")]
    Parse(#[from] toml::de::Error),
}

/// An `hosts x devices_per_host` grid of identical accelerators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceMesh {
    pub id: String,
    pub hosts: u32,
    pub devices_per_host: u32,
    /// Per-device peak FLOP/s.
    pub peak_flops: f64,
    /// Per-device memory in bytes.
    pub mem_device: f64,
    /// Bytes/s between devices of one host.
    pub intra_host_bw: f64,
    /// Bytes/s between hosts of this mesh.
    pub inter_host_bw: f64,
}

impl DeviceMesh {
    pub fn device_count(&self) -> u32 {
        self.hosts * self.devices_per_host
    }

    pub fn total_peak(&self) -> f64 {
        self.peak_flops * self.device_count() as f64
    }

    fn validate(&self) -> Result<(), ClusterError> {
        let bad = |reason: &str| ClusterError::InvalidMesh {
            mesh: self.id.clone(),
            reason: reason.to_string(),
        };
        if self.hosts == 0 {
            return Err(bad("hosts must be >= 1"));
        }
        if self.devices_per_host == 0 || !self.devices_per_host.is_power_of_two() {
            return Err(bad("devices_per_host must be a power of two"));
        }
        let rates = [
            self.peak_flops,
            self.mem_device,
            self.intra_host_bw,
            self.inter_host_bw,
        ];
        if rates.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(bad("rates and memory must be positive"));
        }
        Ok(())
    }
}

/// Shape of a submesh: `hosts x devices_per_host`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MeshShape {
    pub hosts: u32,
    pub devices_per_host: u32,
}

impl MeshShape {
    pub const fn new(hosts: u32, devices_per_host: u32) -> Self {
        Self {
            hosts,
            devices_per_host,
        }
    }

    pub fn device_count(&self) -> u32 {
        self.hosts * self.devices_per_host
    }
}

impl fmt::Display for MeshShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.hosts, self.devices_per_host)
    }
}

/// A legal slice of one mesh of the cluster. `mesh` indexes [`ClusterSpec::meshes`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Submesh {
    pub mesh: usize,
    pub shape: MeshShape,
}

impl Submesh {
    pub fn device_count(&self) -> u32 {
        self.shape.device_count()
    }
}

/// Legal submesh shapes of a mesh, ordered by device count:
/// `(1,1), (1,2), ..., (1,M)` followed by `(2,M), ..., (N,M)`.
pub fn enumerate_submeshes(mesh: &DeviceMesh) -> Vec<MeshShape> {
    let m = mesh.devices_per_host;
    let mut shapes = Vec::new();
    let mut w = 1;
    while w <= m {
        shapes.push(MeshShape::new(1, w));
        w *= 2;
    }
    shapes.extend((2..=mesh.hosts).map(|n| MeshShape::new(n, m)));
    shapes
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossLink {
    pub a: usize,
    pub b: usize,
    pub bw: f64,
}

/// Ordered meshes plus the slow links between them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub meshes: Vec<DeviceMesh>,
    /// Default bytes/s between distinct meshes.
    pub cross_bw: f64,
    /// Per-pair overrides of `cross_bw`.
    #[serde(default)]
    pub cross_links: Vec<CrossLink>,
    /// Seconds added to every boundary transfer.
    #[serde(default)]
    pub cross_latency: f64,
}

impl ClusterSpec {
    pub fn new(meshes: Vec<DeviceMesh>, cross_bw: f64) -> Result<Self, ClusterError> {
        let spec = Self {
            meshes,
            cross_bw,
            cross_links: Vec::new(),
            cross_latency: 0.0,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), ClusterError> {
        if self.meshes.is_empty() {
            return Err(ClusterError::Empty);
        }
        for (i, mesh) in self.meshes.iter().enumerate() {
            mesh.validate()?;
            if self.meshes[..i].iter().any(|m| m.id == mesh.id) {
                return Err(ClusterError::DuplicateMesh(mesh.id.clone()));
            }
        }
        if !(self.cross_bw.is_finite() && self.cross_bw > 0.0)
            || self.cross_links.iter().any(|l| !(l.bw > 0.0))
        {
            return Err(ClusterError::CrossBandwidth);
        }
        for l in &self.cross_links {
            for idx in [l.a, l.b] {
                if idx >= self.meshes.len() {
                    return Err(ClusterError::UnknownMesh(idx.to_string()));
                }
            }
        }
        if !(self.cross_latency >= 0.0) {
            return Err(ClusterError::InvalidMesh {
                mesh: "<cluster>".into(),
                reason: "cross_latency must be >= 0".into(),
            });
        }
        Ok(())
    }

    pub fn mesh_index(&self, id: &str) -> Result<usize, ClusterError> {
        self.meshes
            .iter()
            .position(|m| m.id == id)
            .ok_or_else(|| ClusterError::UnknownMesh(id.to_string()))
    }

    pub fn total_devices(&self) -> u32 {
        self.meshes.iter().map(DeviceMesh::device_count).sum()
    }

    pub fn total_peak(&self) -> f64 {
        self.meshes.iter().map(DeviceMesh::total_peak).sum()
    }

    /// Bandwidth of the direct link between meshes `a` and `b` (`a != b`).
    pub fn cross_bandwidth(&self, a: usize, b: usize) -> f64 {
        self.cross_links
            .iter()
            .find(|l| (l.a == a && l.b == b) || (l.a == b && l.b == a))
            .map_or(self.cross_bw, |l| l.bw)
    }

    /// Bandwidth used between two pipeline stages: the mesh's inter-host
    /// network when both stages live on the same mesh, the cross link otherwise.
    pub fn link_bandwidth(&self, a: &Submesh, b: &Submesh) -> Result<f64, ClusterError> {
        for s in [a, b] {
            if s.mesh >= self.meshes.len() {
                return Err(ClusterError::UnknownMesh(s.mesh.to_string()));
            }
        }
        Ok(self.mesh_pair_bandwidth(a.mesh, b.mesh))
    }

    pub(crate) fn mesh_pair_bandwidth(&self, a: usize, b: usize) -> f64 {
        if a == b {
            self.meshes[a].inter_host_bw
        } else {
            self.cross_bandwidth(a, b)
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ClusterError> {
        let file: ClusterFile = toml::from_str(text)?;
        file.into_spec()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ClusterError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ClusterError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn submesh_label(&self, sub: &Submesh) -> String {
        format!("{}{}", self.meshes[sub.mesh].id, sub.shape)
    }
}

/// A rate given either as a bare number of bytes/s or as a string with units
/// (`"5Gbps"`, `"300GB/s"`, `"150 GBps"`).
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum Rate {
    Number(f64),
    Text(String),
}

impl Rate {
    fn bytes_per_sec(&self) -> Result<f64, ClusterError> {
        match self {
            Rate::Number(v) => Ok(*v),
            Rate::Text(s) => parse_bandwidth(s),
        }
    }
}

/// Parses a bandwidth string into bytes/s. Lower-case `b` means bits,
/// upper-case `B` means bytes.
pub fn parse_bandwidth(text: &str) -> Result<f64, ClusterError> {
    let err = || ClusterError::Bandwidth(text.to_string());
    let s = text.trim();
    let split = s
        .find(|c: char| !(c.is_ascii_digit() || c == '.' || c == 'e' || c == '-' || c == '+'))
        .unwrap_or(s.len());
    let (num, unit) = s.split_at(split);
    let value: f64 = num.trim().parse().map_err(|_| err())?;
    let unit = unit.trim();
    if unit.is_empty() {
        return Ok(value);
    }
    let (prefix, rest) = match unit.chars().next() {
        Some('K' | 'k') => (1e3, &unit[1..]),
        Some('M') => (1e6, &unit[1..]),
        Some('G') => (1e9, &unit[1..]),
        Some('T') => (1e12, &unit[1..]),
        _ => (1.0, unit),
    };
    let per_sec = match rest {
        "bps" | "bit/s" | "b/s" => 1.0 / 8.0,
        "Bps" | "B/s" | "byte/s" => 1.0,
        _ => return Err(err()),
    };
    Ok(value * prefix * per_sec)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MeshFile {
    id: String,
    #[serde(alias = "count")]
    hosts: u32,
    devices_per_host: u32,
    #[serde(default)]
    peak_flops: Option<f64>,
    #[serde(default)]
    peak_tflops: Option<f64>,
    #[serde(default)]
    mem_bytes: Option<f64>,
    #[serde(default)]
    mem_gb: Option<f64>,
    intra_host_bw: Rate,
    inter_host_bw: Rate,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CrossLinkFile {
    a: String,
    b: String,
    bw: Rate,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClusterFile {
    cross_bw: Rate,
    #[serde(default)]
    cross_latency: f64,
    #[serde(default, rename = "cross_link")]
    cross_links: Vec<CrossLinkFile>,
    #[serde(rename = "mesh")]
    meshes: Vec<MeshFile>,
}

impl ClusterFile {
    fn into_spec(self) -> Result<ClusterSpec, ClusterError> {
        let mut meshes = Vec::with_capacity(self.meshes.len());
        for m in self.meshes {
            let missing = |what: &str| ClusterError::InvalidMesh {
                mesh: m.id.clone(),
                reason: format!("missing {what}"),
            };
            let peak_flops = match (m.peak_flops, m.peak_tflops) {
                (Some(p), _) => p,
                (None, Some(t)) => t * 1e12,
                _ => return Err(missing("peak_flops or peak_tflops")),
            };
            let mem_device = match (m.mem_bytes, m.mem_gb) {
                (Some(b), _) => b,
                (None, Some(g)) => g * 1e9,
                _ => return Err(missing("mem_bytes or mem_gb")),
            };
            meshes.push(DeviceMesh {
                intra_host_bw: m.intra_host_bw.bytes_per_sec()?,
                inter_host_bw: m.inter_host_bw.bytes_per_sec()?,
                id: m.id,
                hosts: m.hosts,
                devices_per_host: m.devices_per_host,
                peak_flops,
                mem_device,
            });
        }
        let mut spec = ClusterSpec {
            meshes,
            cross_bw: self.cross_bw.bytes_per_sec()?,
            cross_links: Vec::new(),
            cross_latency: self.cross_latency,
        };
        for link in self.cross_links {
            let a = spec.mesh_index(&link.a)?;
            let b = spec.mesh_index(&link.b)?;
            spec.cross_links.push(CrossLink {
                a,
                b,
                bw: link.bw.bytes_per_sec()?,
            });
        }
        spec.validate()?;
        Ok(spec)
    }
}
