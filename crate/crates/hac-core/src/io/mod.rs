//! Declarative scenario configuration, CSV trajectory export, run reports,
//! and plot-script emission.

pub mod config;
pub mod csv;
pub mod presets;
pub mod report;

pub use config::{load_config, load_config_str, resolve, ConfigDocument, ConfigError, Resolved};
pub use csv::{export_csv, export_csv_path, import_csv, Normalization};
pub use report::{plot_script, RunReport};
