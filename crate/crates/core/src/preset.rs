//! Model presets stored as TOML.
//!
//! Three presets ship with the crate (`hardnet68-mseg`, `small`, `tiny`); any other
//! variant can be described in a file with the same schema:
//!
//! ```toml
//! name = "..."
//! [backbone]   # in_ch, multiplier, activation, norm, bn_eps, stem, stem_pool,
//!              # downsample, stages, taps (see BackboneCfg)
//! [decoder]    # rfb_out_ch, dilations, merge_kernel, align_corners, norm, bn_eps
//! ```

use std::path::Path;

use crate::decoder::ModelCfg;
use crate::error::{Error, Result};

const HARDNET68: &str = include_str!("../presets/hardnet68-mseg.toml");
const SMALL: &str = include_str!("../presets/small.toml");
const TINY: &str = include_str!("../presets/tiny.toml");

pub const PRESET_NAMES: [&str; 3] = ["hardnet68-mseg", "small", "tiny"];

pub fn from_toml_str(text: &str) -> Result<ModelCfg> {
    toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
}

pub fn to_toml_string(cfg: &ModelCfg) -> Result<String> {
    toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))
}

/// Built-in preset by name.
pub fn builtin(name: &str) -> Result<ModelCfg> {
    let text = match name {
        "hardnet68-mseg" | "hardnet68" => HARDNET68,
        "small" => SMALL,
        "tiny" => TINY,
        other => {
            return Err(Error::Config(format!(
                "unknown preset `{other}` (built in: {})",
                PRESET_NAMES.join(", ")
            )))
        }
    };
    from_toml_str(text)
}

/// A built-in name or a path to a TOML file.
pub fn load(name_or_path: &str) -> Result<ModelCfg> {
    let p = Path::new(name_or_path);
    if p.extension().is_some_and(|e| e == "toml") || p.exists() {
        let text = std::fs::read_to_string(p)?;
        from_toml_str(&text)
    } else {
        builtin(name_or_path)
    }
}
