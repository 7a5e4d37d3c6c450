//! Line-delimited JSON configuration. Each non-blank line is one of
//!
//! ```text
//! {"role":"broker","host":"127.0.0.1","port":7400}
//! {"keys":{"private_key":"publisher.pem","public_key":"publisher.pub.pem","sym_key":"sk.b64","provisioning":"provision.json"}}
//! {"policy":{"allow":["c1","c2"],"revoked":["c3"]}}
//! {"timeout_ms":5000}
//! ```
//!
//! Relative key paths resolve against the config file's directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use scbr_core::envelope::{KeyPair, PublicKey, SymKey};
use scbr_core::model::ClientId;
use scbr_core::publisher::PublisherSecrets;
use scbr_core::router::ProvisioningBlob;
use serde::{Deserialize, Serialize};

use crate::publisher::AdmissionPolicy;
use crate::{Endpoint, Role, DEFAULT_TIMEOUT};

pub const CONFIG_ENV: &str = "SCBR_CONFIG";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("line {line}: {msg}")]
    Line { line: usize, msg: String },
    #[error("config has no {0}")]
    Missing(&'static str),
    #[error("{path}: {msg}")]
    Key { path: PathBuf, msg: String },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeyPaths {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub private_key: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub public_key: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sym_key: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provisioning: Option<PathBuf>,
}

#[derive(Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct PolicyLine {
    #[serde(default)]
    allow: Vec<String>,
    #[serde(default)]
    revoked: Vec<String>,
}

#[derive(Deserialize, Serialize)]
#[serde(untagged)]
enum ConfigLine {
    Endpoint(Endpoint),
    Keys {
        keys: KeyPaths,
    },
    Policy {
        policy: PolicyLine,
    },
    Timeout {
        timeout_ms: u64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub endpoints: Vec<Endpoint>,
    pub keys: KeyPaths,
    pub policy: AdmissionPolicy,
    pub timeout: Duration,
    /// Directory relative key paths are resolved against.
    pub base_dir: PathBuf,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            endpoints: Vec::new(),
            keys: KeyPaths::default(),
            policy: AdmissionPolicy::new(),
            timeout: DEFAULT_TIMEOUT,
            base_dir: PathBuf::from("."),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ConfigError + '_ {
    move |source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl Config {
    /// `$SCBR_CONFIG` if set, otherwise `default`.
    pub fn locate(default: &Path) -> PathBuf {
        std::env::var_os(CONFIG_ENV).map(PathBuf::from).unwrap_or_else(|| default.to_path_buf())
    }

    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        Config::parse(&text, base)
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Config, ConfigError> {
        let mut cfg = Config {
            base_dir: base_dir.to_path_buf(),
            ..Config::default()
        };
        let (mut allow, mut revoked) = (Vec::new(), Vec::new());
        for (i, line) in text.lines().enumerate() {
            let bad = |msg: String| ConfigError::Line { line: i + 1, msg };
            if line.trim().is_empty() {
                continue;
            }
            let parsed: ConfigLine = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
            match parsed {
                ConfigLine::Endpoint(e) => cfg.endpoints.push(e),
                ConfigLine::Keys { keys } => cfg.keys = keys,
                ConfigLine::Policy { policy } => {
                    let id = |s: String| ClientId::new(s).map_err(|e| bad(e.to_string()));
                    for s in policy.allow {
                        allow.push(id(s)?);
                    }
                    for s in policy.revoked {
                        revoked.push(id(s)?);
                    }
                }
                ConfigLine::Timeout { timeout_ms } => cfg.timeout = Duration::from_millis(timeout_ms),
            }
        }
        cfg.policy = AdmissionPolicy::from_lists(allow, revoked);
        Ok(cfg)
    }

    pub fn to_lines(&self) -> String {
        let mut lines = Vec::new();
        for e in &self.endpoints {
            lines.push(ConfigLine::Endpoint(e.clone()));
        }
        lines.push(ConfigLine::Keys { keys: self.keys.clone() });
        lines.push(ConfigLine::Policy {
            policy: PolicyLine {
                allow: self.policy.allowed().map(|c| c.to_string()).collect(),
                revoked: self.policy.revoked().map(|c| c.to_string()).collect(),
            },
        });
        lines.push(ConfigLine::Timeout {
            timeout_ms: self.timeout.as_millis() as u64,
        });
        lines
            .iter()
            .map(|l| serde_json::to_string(l).expect("config lines serialize") + "\n")
            .collect()
    }

    pub fn endpoint(&self, role: Role) -> Option<&Endpoint> {
        self.endpoints.iter().find(|e| e.role == role)
    }

    pub fn endpoint_addr(&self, role: Role) -> Result<String, ConfigError> {
        self.endpoint(role).map(Endpoint::addr).ok_or(ConfigError::Missing(match role {
            Role::Broker => "broker endpoint",
            Role::Publisher => "publisher endpoint",
            Role::Client => "client endpoint",
        }))
    }

    fn key_file(&self, p: &Option<PathBuf>, what: &'static str) -> Result<(PathBuf, String), ConfigError> {
        let p = p.as_ref().ok_or(ConfigError::Missing(what))?;
        let path = self.base_dir.join(p);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        Ok((path, text))
    }

    pub fn sym_key(&self) -> Result<SymKey, ConfigError> {
        let (path, text) = self.key_file(&self.keys.sym_key, "sym_key path")?;
        SymKey::from_base64(text.trim()).map_err(|e| ConfigError::Key { path, msg: e.to_string() })
    }

    pub fn public_key(&self) -> Result<PublicKey, ConfigError> {
        let (path, text) = self.key_file(&self.keys.public_key, "public_key path")?;
        PublicKey::from_pem(&text).map_err(|e| ConfigError::Key { path, msg: e.to_string() })
    }

    pub fn publisher_secrets(&self) -> Result<PublisherSecrets, ConfigError> {
        let (path, text) = self.key_file(&self.keys.private_key, "private_key path")?;
        let keys = KeyPair::from_pem(&text).map_err(|e| ConfigError::Key { path, msg: e.to_string() })?;
        Ok(PublisherSecrets { keys, sk: self.sym_key()? })
    }

    pub fn provisioning_blob(&self) -> Result<ProvisioningBlob, ConfigError> {
        let (path, text) = self.key_file(&self.keys.provisioning, "provisioning path")?;
        ProvisioningBlob::from_json(&text).map_err(|e| ConfigError::Key { path, msg: e.to_string() })
    }
}

/// Write the publisher's key material into `dir` and return paths relative to it.
pub fn write_key_material(dir: &Path, secrets: &PublisherSecrets, version: u64) -> Result<KeyPaths, ConfigError> {
    let key_err = |path: &Path| {
        let path = path.to_path_buf();
        move |e: String| ConfigError::Key { path, msg: e }
    };
    let files = [
        ("publisher.pem", secrets.keys.to_pem().map_err(|e| e.to_string())),
        ("publisher.pub.pem", secrets.public().to_pem().map_err(|e| e.to_string())),
        ("sk.b64", Ok(secrets.sk.to_base64() + "\n")),
        (
            "provision.json",
            secrets.provisioning_blob(version).to_json().map_err(|e| e.to_string()),
        ),
    ];
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (name, body) in files {
        let path = dir.join(name);
        let body = body.map_err(key_err(&path))?;
        fs::write(&path, body).map_err(io_err(&path))?;
    }
    Ok(KeyPaths {
        private_key: Some("publisher.pem".into()),
        public_key: Some("publisher.pub.pem".into()),
        sym_key: Some("sk.b64".into()),
        provisioning: Some("provision.json".into()),
    })
}
