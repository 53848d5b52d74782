mod level;
mod loader;
mod manifest;
pub mod package;
mod sign;

pub use level::VerificationLevel;
pub use loader::{load_skill, LoadContext, LoadError, LoadedSkill, ReplayError, ReplayGuard, SkillArtifact};
pub use manifest::{Manifest, ManifestError};
pub use package::{artifact_hash, content_archive, read_package, sign_package, PackageError};
pub use sign::{sign_skill, signing_message, verify_skill, SignError};
