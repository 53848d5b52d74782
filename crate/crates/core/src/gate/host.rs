//! The host side of the gate: what actually touches the world once a call is
//! approved.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde_json::{Map, Value};
use thiserror::Error;

use crate::capability::Capability;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("{0}")]
pub struct HostError(pub String);

/// An irreversible filesystem mutation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FsWrite {
    Delete,
    Overwrite(Vec<u8>),
    Append(Vec<u8>),
    Truncate,
    /// Replace the target with `target ‖ "\n" ‖ source`.
    Merge(PathBuf),
}

impl FsWrite {
    pub fn mode(&self) -> &'static str {
        match self {
            FsWrite::Delete => "delete",
            FsWrite::Overwrite(_) => "overwrite",
            FsWrite::Append(_) => "append",
            FsWrite::Truncate => "truncate",
            FsWrite::Merge(_) => "merge",
        }
    }
}

/// New content of a file after `w`, or `None` when the file is removed.
/// `current` is `None` for a missing file; `source` is the merge source.
pub fn apply_write(current: Option<&[u8]>, w: &FsWrite, source: Option<&[u8]>) -> Result<Option<Vec<u8>>, HostError> {
    let missing = || HostError("target does not exist".into());
    match w {
        FsWrite::Delete => current.map(|_| None).ok_or_else(missing),
        FsWrite::Overwrite(bytes) => Ok(Some(bytes.clone())),
        FsWrite::Append(bytes) => {
            let mut out = current.map(<[u8]>::to_vec).unwrap_or_default();
            out.extend_from_slice(bytes);
            Ok(Some(out))
        }
        FsWrite::Truncate => current.map(|_| Some(Vec::new())).ok_or_else(missing),
        FsWrite::Merge(_) => {
            let mut out = current.ok_or_else(missing)?.to_vec();
            let src = source.ok_or_else(|| HostError("merge source does not exist".into()))?;
            out.push(b'\n');
            out.extend_from_slice(src);
            Ok(Some(out))
        }
    }
}

pub type Handler = Box<dyn FnMut(&str, &Map<String, Value>) -> Result<Value, String> + Send>;

pub trait Host: Send {
    /// `Ok(None)` when the file does not exist.
    fn read(&mut self, path: &Path) -> Result<Option<Vec<u8>>, HostError>;
    fn write(&mut self, path: &Path, w: &FsWrite) -> Result<(), HostError>;
    /// Non-filesystem capabilities. `target` is the tool name for
    /// `tool.invoke`.
    fn invoke(&mut self, op: Capability, target: &str, args: &Map<String, Value>) -> Result<Value, HostError>;
}

fn read_opt(path: &Path) -> Result<Option<Vec<u8>>, HostError> {
    match std::fs::read(path) {
        Ok(b) => Ok(Some(b)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(HostError(e.to_string())),
    }
}

/// The real filesystem plus registered handlers for everything else. A
/// capability without a handler fails at execution.
#[derive(Default)]
pub struct SystemHost {
    bindings: BTreeMap<Capability, Handler>,
    tools: BTreeMap<String, Handler>,
}

impl SystemHost {
    pub fn new() -> SystemHost {
        SystemHost::default()
    }

    pub fn bind(&mut self, cap: Capability, handler: Handler) {
        self.bindings.insert(cap, handler);
    }

    pub fn bind_tool(&mut self, name: impl Into<String>, handler: Handler) {
        self.tools.insert(name.into(), handler);
    }
}

impl Host for SystemHost {
    fn read(&mut self, path: &Path) -> Result<Option<Vec<u8>>, HostError> {
        read_opt(path)
    }

    fn write(&mut self, path: &Path, w: &FsWrite) -> Result<(), HostError> {
        let current = read_opt(path)?;
        let source = match w {
            FsWrite::Merge(src) => read_opt(src)?,
            _ => None,
        };
        match apply_write(current.as_deref(), w, source.as_deref())? {
            Some(bytes) => std::fs::write(path, bytes),
            None => std::fs::remove_file(path),
        }
        .map_err(|e| HostError(e.to_string()))
    }

    fn invoke(&mut self, op: Capability, target: &str, args: &Map<String, Value>) -> Result<Value, HostError> {
        let handler = if op == Capability::ToolInvoke {
            self.tools.get_mut(target)
        } else {
            self.bindings.get_mut(&op)
        };
        match handler {
            Some(h) => h(target, args).map_err(HostError),
            None => Err(HostError(format!("no host binding for {} {target}", op.token()))),
        }
    }
}
