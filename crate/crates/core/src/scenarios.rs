//! Scenario files shipped with the crate.

use crate::config::NetworkConfig;
use crate::error::{config, Result};

const BUNDLED: &[(&str, &str)] = &[
    ("merge_exp1", include_str!("../scenarios/merge_exp1.json")),
    ("merge_exp2", include_str!("../scenarios/merge_exp2.json")),
    ("diverge_exp3", include_str!("../scenarios/diverge_exp3.json")),
    ("diverge_exp4", include_str!("../scenarios/diverge_exp4.json")),
    ("eight_link", include_str!("../scenarios/eight_link.json")),
    ("grid20_high", include_str!("../scenarios/grid20_high.json")),
    ("grid20_medium", include_str!("../scenarios/grid20_medium.json")),
];

/// Names of the bundled scenarios.
pub fn names() -> impl Iterator<Item = &'static str> {
    BUNDLED.iter().map(|(name, _)| *name)
}

/// Raw JSON text of a bundled scenario.
pub fn source(name: &str) -> Option<&'static str> {
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, text)| *text)
}

pub fn load(name: &str) -> Result<NetworkConfig> {
    let text = source(name).ok_or_else(|| config(format!("no bundled scenario named {name:?}")))?;
    NetworkConfig::from_json(text)
}
