//! Model files: pretty-printed JSON with fixed field names.
//!
//! ```text
//! { "format": "h2p-cnn", "version": 1, "params": { "p": .., "m": .., "history_len": ..,
//!   "mode": "fp"|"tp", "q": .., "w1": [..], "b1": [..], "gamma1": [..], "beta1": [..],
//!   "running_mean1": [..], "running_var1": [..], "w2": [..], "gamma2": .., "beta2": ..,
//!   "running_mean2": .., "running_var2": .. } }
//! ```
//!
//! Arrays are row-major (`w1[index * m + filter]`, `w2[position * m +
//! filter]`). Numbers use the shortest decimal form that parses back to the
//! identical `f64`, so save/load is bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{CnnError, CnnParams};

pub const MODEL_FORMAT: &str = "h2p-cnn";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelIoError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed model file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported model format {format:?} version {version}")]
    Format { format: String, version: u32 },
    #[error(transparent)]
    Invalid(#[from] CnnError),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format: String,
    version: u32,
    params: CnnParams,
}

pub fn params_to_json(params: &CnnParams) -> String {
    let file = ModelFile {
        format: MODEL_FORMAT.into(),
        version: MODEL_VERSION,
        params: params.clone(),
    };
    serde_json::to_string_pretty(&file).expect("params serialize")
}

pub fn params_from_json(text: &str) -> Result<CnnParams, ModelIoError> {
    let file: ModelFile = serde_json::from_str(text)?;
    if file.format != MODEL_FORMAT || file.version != MODEL_VERSION {
        return Err(ModelIoError::Format {
            format: file.format,
            version: file.version,
        });
    }
    file.params.check_shapes()?;
    Ok(file.params)
}

pub fn save_params(params: &CnnParams, path: &Path) -> Result<(), ModelIoError> {
    fs::write(path, params_to_json(params))?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<CnnParams, ModelIoError> {
    params_from_json(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cnn::{init_params, Mode};

    #[test]
    fn json_round_trip_is_exact() {
        let mut p = init_params(6, 3, 9, Mode::Tp, 0.8, 77);
        p.running_var2 = 0.1 + 0.2;
        p.beta2 = -1e-300;
        let back = params_from_json(&params_to_json(&p)).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn rejects_unknown_format_and_bad_shapes() {
        let p = init_params(4, 2, 3, Mode::Fp, 0.8, 1);
        let text = params_to_json(&p).replace("h2p-cnn", "other");
        assert!(matches!(
            params_from_json(&text),
            Err(ModelIoError::Format { .. })
        ));
        let mut bad = p.clone();
        bad.w2.pop();
        assert!(matches!(
            params_from_json(&params_to_json(&bad)),
            Err(ModelIoError::Invalid(_))
        ));
    }
}
