//! Command implementations and the annotation service behind the `irap`
//! binary.

pub mod analyze;
pub mod error;
pub mod evaluate;
pub mod service;
pub mod synthesize;

pub use error::CommandError;

use std::path::Path;

use irap_core::image::{load_image, Image, ImageError};
use irap_core::irap::{DatasetManifest, IrapError, Quadruplet, Slot};

/// Loads a manifest, mapping unreadable files to an input error.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest, CommandError> {
    if !path.is_file() {
        return Err(CommandError::Input(format!("manifest {} not found", path.display())));
    }
    DatasetManifest::load(path).map_err(|e| match e {
        IrapError::Io(io) => CommandError::Input(format!("{}: {io}", path.display())),
        other => CommandError::Manifest(other),
    })
}

/// Loads one image of a quadruplet relative to the manifest.
pub fn load_slot(manifest_path: &Path, quad: &Quadruplet, slot: Slot) -> Result<Image, CommandError> {
    let path = DatasetManifest::resolve(manifest_path, quad.images.get(slot));
    load_image(&path).map_err(|e| match e {
        ImageError::Io(io) => CommandError::Input(format!("{}: {io}", path.display())),
        other => CommandError::Image { path: path.display().to_string(), source: other },
    })
}
