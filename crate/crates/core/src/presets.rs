//! Configurations shipped with the crate, addressed by name.
use crate::error::{Error, Result};
use crate::lsem::LsemSpec;
use crate::sweep::SweepConfig;

const SWEEPS: &[(&str, &str)] = &[
    ("fig5a", include_str!("../presets/fig5a.json")),
    ("fig5b", include_str!("../presets/fig5b.json")),
    ("fig5c", include_str!("../presets/fig5c.json")),
    ("fig5d", include_str!("../presets/fig5d.json")),
    ("fig6a", include_str!("../presets/fig6a.json")),
    ("fig6b", include_str!("../presets/fig6b.json")),
    ("fig6c", include_str!("../presets/fig6c.json")),
    ("fig6d", include_str!("../presets/fig6d.json")),
    ("fig7a", include_str!("../presets/fig7a.json")),
    ("fig7b", include_str!("../presets/fig7b.json")),
    ("fig7c", include_str!("../presets/fig7c.json")),
    ("fig7d", include_str!("../presets/fig7d.json")),
    ("fig8a", include_str!("../presets/fig8a.json")),
    ("fig8b", include_str!("../presets/fig8b.json")),
    ("fig8c", include_str!("../presets/fig8c.json")),
    ("fig8d", include_str!("../presets/fig8d.json")),
    ("ratio-1a", include_str!("../presets/ratio-1a.json")),
    ("ratio-1b", include_str!("../presets/ratio-1b.json")),
    ("ratio-1c", include_str!("../presets/ratio-1c.json")),
    ("ratio-2a", include_str!("../presets/ratio-2a.json")),
    ("ratio-2b", include_str!("../presets/ratio-2b.json")),
    ("ratio-2c", include_str!("../presets/ratio-2c.json")),
    ("ratio-3a", include_str!("../presets/ratio-3a.json")),
    ("ratio-3b", include_str!("../presets/ratio-3b.json")),
    ("ratio-3c", include_str!("../presets/ratio-3c.json")),
    ("ratio-4a", include_str!("../presets/ratio-4a.json")),
    ("ratio-4b", include_str!("../presets/ratio-4b.json")),
    ("ratio-4c", include_str!("../presets/ratio-4c.json")),
];

const SPECS: &[(&str, &str)] = &[
    ("base-case", include_str!("../presets/base-case.json")),
    ("completeness", include_str!("../presets/completeness.json")),
    ("section6", include_str!("../presets/section6.json")),
];

pub fn sweep_names() -> impl Iterator<Item = &'static str> {
    SWEEPS.iter().map(|(n, _)| *n)
}

pub fn spec_names() -> impl Iterator<Item = &'static str> {
    SPECS.iter().map(|(n, _)| *n)
}

pub fn sweep(name: &str) -> Result<SweepConfig> {
    let (_, text) = SWEEPS
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| Error::Config(format!("no sweep preset named {name:?}")))?;
    Ok(serde_json::from_str(text)?)
}

/// Spec presets, plus the base spec of any sweep preset.
pub fn spec(name: &str) -> Result<LsemSpec> {
    if let Some((_, text)) = SPECS.iter().find(|(n, _)| *n == name) {
        return Ok(serde_json::from_str(text)?);
    }
    sweep(name).map(|c| c.base_spec).map_err(|_| Error::Config(format!("no spec preset named {name:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_parses_and_validates() {
        for n in sweep_names() {
            let c = sweep(n).unwrap();
            c.validate().unwrap_or_else(|e| panic!("{n}: {e}"));
        }
        for n in spec_names() {
            assert!(spec(n).unwrap().validate().is_empty(), "{n}");
        }
        assert!(spec("fig5a").is_ok());
        assert!(sweep("fig9a").is_err());
    }
}
