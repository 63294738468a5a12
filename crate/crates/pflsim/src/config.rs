//! TOML run configuration plus command-line overrides.

use std::fs;
use std::path::Path;

use pflsim_core::config::{Ablation, ConfigError, RunConfig};

use crate::error::{format_err, io_err, Result};

/// Values given on the command line; each one replaces the file's value.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<String>,
    pub ablation: Option<String>,
}

pub fn parse_config(text: &str) -> std::result::Result<RunConfig, toml::de::Error> {
    toml::from_str(text)
}

pub fn to_toml(config: &RunConfig) -> String {
    toml::to_string(config).expect("run config always serializes")
}

/// Reads `path`, or starts from the defaults when there is no file.
pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
    let mut config = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(io_err(p))?;
            parse_config(&text).map_err(|e| format_err(p, e))?
        }
        None => RunConfig::default(),
    };
    apply(&mut config, overrides)?;
    Ok(config)
}

/// `--seed` drives both the run and the synthetic generator.
pub fn apply(config: &mut RunConfig, o: &Overrides) -> std::result::Result<(), ConfigError> {
    if let Some(seed) = o.seed {
        config.seed = seed;
        config.data.synth.seed = seed;
    }
    if let Some(out) = &o.out {
        config.output_dir = out.clone();
    }
    if let Some(name) = &o.ablation {
        config.federation.ablation = parse_ablation(name)?;
    }
    Ok(())
}

pub fn parse_ablation(name: &str) -> std::result::Result<Ablation, ConfigError> {
    let key = match name {
        "no_communication" => "as2",
        "no_prompt" => "as1",
        "no_image_prompt" => "as3",
        "no_text_prompt" => "as4",
        other => other,
    };
    Ablation::preset(key).ok_or_else(|| ConfigError::new("--ablation", format!("unknown mode `{name}`, expected none|as1|as2|as3|as4")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips() {
        let c = RunConfig::default();
        let text = to_toml(&c);
        let back = parse_config(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(to_toml(&back), text);
    }

    #[test]
    fn flags_win_over_file() {
        let mut c = RunConfig::default();
        c.seed = 4;
        let text = to_toml(&c);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, text).unwrap();
        let o = Overrides { seed: Some(9), out: Some("x".into()), ablation: Some("no_communication".into()) };
        let got = load(Some(&path), &o).unwrap();
        assert_eq!((got.seed, got.data.synth.seed, got.output_dir.as_str()), (9, 9, "x"));
        assert_eq!(got.federation.ablation, Ablation::preset("as2").unwrap());
        assert_eq!(load(Some(&path), &Overrides::default()).unwrap().seed, 4);
    }

    #[test]
    fn unknown_keys_and_modes_are_rejected() {
        let mut text = to_toml(&RunConfig::default());
        text = text.replace("[losses]", "[losses]\ngamma = 1.0");
        assert!(parse_config(&text).unwrap_err().to_string().contains("gamma"));
        assert_eq!(parse_ablation("as7").unwrap_err().key, "--ablation");
    }
}
