//! TOML run configuration. Unknown keys and version mismatches are errors.

use std::path::Path;

use crate::error::{Error, Result};
use crate::training::RunConfig;

use super::{read_text, write_text};

pub fn parse_run_config(text: &str) -> Result<RunConfig> {
    let config: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
    config.validate()?;
    Ok(config)
}

pub fn read_run_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    parse_run_config(&read_text(path)?).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn format_run_config(config: &RunConfig) -> Result<String> {
    toml::to_string_pretty(config).map_err(|e| Error::Config(e.to_string()))
}

pub fn write_run_config(path: impl AsRef<Path>, config: &RunConfig) -> Result<()> {
    write_text(path.as_ref(), &format_run_config(config)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::CounterpartMode;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        let text = format_run_config(&c).unwrap();
        assert_eq!(parse_run_config(&text).unwrap(), c);
    }

    #[test]
    fn minimal_file_gets_paper_defaults() {
        let c = parse_run_config("version = 1\n").unwrap();
        assert_eq!(c.loss.lambda_normal, 1.6e-4);
        assert_eq!(c.loss.lambda_edge, 1.6e-4);
        assert_eq!(c.loss.lambda_lap, 0.005);
        assert_eq!(c.loss.epsilon, 0.001);
        assert_eq!(c.lr.initial, 1e-4);
        assert_eq!((c.lr.factor, c.lr.every), (0.5, 5));
        assert_eq!(c.batch_size, 1);
        assert_eq!((c.synthetic_epochs, c.mixed_epochs), (10, 10));
        assert_eq!(c.loss.counterpart_mode, CounterpartMode::ClosestVertex);
    }

    #[test]
    fn partial_tables_are_rejected_or_filled() {
        let text = "version = 1\nseed = 4\n[loss]\nlambda_normal = 0.1\nlambda_edge = 0.2\nlambda_lap = 0.0\nepsilon = 0.01\ncounterpart_mode = \"normal_ray\"\n";
        let c = parse_run_config(text).unwrap();
        assert_eq!(c.loss.counterpart_mode, CounterpartMode::NormalRay);
        assert_eq!(c.seed, 4);
        assert!(parse_run_config("version = 1\n[loss]\nlambda_normal = 0.1\n").is_err());
    }

    #[test]
    fn schema_violations() {
        assert!(matches!(parse_run_config("version = 1\nbatch_sise = 2\n"), Err(Error::Config(_))));
        assert!(matches!(parse_run_config("seed = 1\n"), Err(Error::Config(_))));
        assert!(matches!(parse_run_config("version = 2\n"), Err(Error::Config(_))));
        assert!(matches!(parse_run_config("version = 1\nbatch_size = 0\n"), Err(Error::Config(_))));
        assert!(matches!(parse_run_config("version = 1\n[model]\nvertex_count = 3\n"), Err(Error::Config(_))));
    }
}
