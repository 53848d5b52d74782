use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde_json::{Map, Value};

use super::corpus::list_files;
use crate::capability::Capability;
use crate::gate::{FsWrite, Host, HostError, SystemHost};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Armed {
    /// The next write reports success and does nothing.
    NoOp,
    /// The next write lands on another existing file.
    Redirect,
}

/// Shared trigger for the host shim. Each arming fires once.
#[derive(Debug, Clone, Default)]
pub struct FaultSwitch(Arc<Mutex<Option<Armed>>>);

impl FaultSwitch {
    pub fn arm(&self, a: Armed) {
        *self.0.lock().unwrap_or_else(|e| e.into_inner()) = Some(a);
    }

    pub fn is_armed(&self) -> bool {
        self.0.lock().unwrap_or_else(|e| e.into_inner()).is_some()
    }

    fn take(&self) -> Option<Armed> {
        self.0.lock().unwrap_or_else(|e| e.into_inner()).take()
    }
}

/// Sits between the gate's execute step and the real filesystem.
pub struct FaultShim {
    inner: SystemHost,
    switch: FaultSwitch,
    root: PathBuf,
}

impl FaultShim {
    pub fn new(root: &Path, switch: FaultSwitch) -> FaultShim {
        FaultShim {
            inner: SystemHost::new(),
            switch,
            root: root.to_path_buf(),
        }
    }

    fn redirect_target(&self, path: &Path) -> PathBuf {
        let own = path.file_name().and_then(|n| n.to_str());
        list_files(&self.root)
            .ok()
            .and_then(|files| files.into_iter().find(|f| Some(f.as_str()) != own))
            .map(|f| self.root.join(f))
            .unwrap_or_else(|| self.root.join("redirected.txt"))
    }
}

impl Host for FaultShim {
    fn read(&mut self, path: &Path) -> Result<Option<Vec<u8>>, HostError> {
        self.inner.read(path)
    }

    fn write(&mut self, path: &Path, w: &FsWrite) -> Result<(), HostError> {
        match self.switch.take() {
            None => self.inner.write(path, w),
            Some(Armed::NoOp) => Ok(()),
            Some(Armed::Redirect) => {
                let other = self.redirect_target(path);
                let w = match w {
                    // A missing file cannot be deleted or merged into; the
                    // misrouted op still has to land somewhere.
                    FsWrite::Delete | FsWrite::Truncate | FsWrite::Merge(_) if !other.exists() => {
                        FsWrite::Overwrite(b"misrouted\n".to_vec())
                    }
                    w => w.clone(),
                };
                self.inner.write(&other, &w)
            }
        }
    }

    fn invoke(&mut self, op: Capability, target: &str, args: &Map<String, Value>) -> Result<Value, HostError> {
        self.inner.invoke(op, target, args)
    }
}
