//! Bundled configuration presets, addressable as `preset:<name>`.

pub const PRESETS: &[(&str, &str)] = &[
    ("table1-ib", include_str!("../../presets/table1-ib.toml")),
    ("table1-coi", include_str!("../../presets/table1-coi.toml")),
    ("fault-ride-through", include_str!("../../presets/fault-ride-through.toml")),
    ("frequency-sweep", include_str!("../../presets/frequency-sweep.toml")),
];

pub fn preset(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, text)| *text)
}

pub fn preset_names() -> Vec<&'static str> {
    PRESETS.iter().map(|(n, _)| *n).collect()
}
