//! Loading of input documents, with failures marked as input errors.

use std::fmt::Display;
use std::fs;
use std::path::Path;

use daxs_core::tracks::{PeakTracks, SeedCurves};
use daxs_core::SpectralImage;
use serde::de::DeserializeOwned;
use thiserror::Error;

/// A missing, unreadable, malformed or invalid input. The binary exits
/// with status 2 on these and 1 on everything else.
#[derive(Debug, Error)]
#[error("{0}")]
pub struct InputError(pub String);

impl InputError {
    pub fn new(msg: impl Into<String>) -> Self {
        InputError(msg.into())
    }

    fn at(path: &Path, e: impl Display) -> Self {
        InputError(format!("{}: {e}", path.display()))
    }
}

pub fn read_text(path: &Path) -> Result<String, InputError> {
    fs::read_to_string(path).map_err(|e| InputError::at(path, e))
}

/// Parses a JSON document; serde errors carry the line and column.
pub fn parse_json<T: DeserializeOwned>(text: &str) -> Result<T, String> {
    serde_json::from_str(text).map_err(|e| e.to_string())
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T, InputError> {
    parse_json(&read_text(path)?).map_err(|e| InputError::at(path, e))
}

pub fn load_image(path: &Path) -> Result<SpectralImage, InputError> {
    SpectralImage::from_json(&read_text(path)?).map_err(|e| InputError::at(path, e))
}

pub fn load_seeds(path: &Path) -> Result<SeedCurves, InputError> {
    SeedCurves::from_json(&read_text(path)?).map_err(|e| InputError::at(path, e))
}

pub fn load_tracks(path: &Path) -> Result<PeakTracks, InputError> {
    let file = fs::File::open(path).map_err(|e| InputError::at(path, e))?;
    let tracks = PeakTracks::read_csv(file).map_err(|e| InputError::at(path, e))?;
    tracks.validate().map_err(|e| InputError::at(path, e))?;
    Ok(tracks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use daxs_core::ModelParams;

    #[test]
    fn malformed_json_reports_line_and_column() {
        let err = parse_json::<ModelParams>("{\n  \"couplings\": ,\n}").unwrap_err();
        assert!(err.contains("line 2 column"), "{err}");
    }

    #[test]
    fn missing_file_names_the_path() {
        let err = read_text(Path::new("/nonexistent/daxs.json")).unwrap_err();
        assert!(err.to_string().starts_with("/nonexistent/daxs.json: "));
    }
}
