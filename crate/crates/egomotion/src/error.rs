use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("missing {stage} checkpoint; run `egomotion {command}` first")]
    MissingStage { stage: String, command: &'static str },
    #[error("frozen-stage contract violated: reasoner weights changed during stage II ({before} -> {after})")]
    FrozenContract { before: String, after: String },
    #[error("joint run left the reasoner weights unchanged ({0})")]
    JointUnchanged(String),
    #[error("plot: {0}")]
    Plot(String),
    #[error(transparent)]
    Core(#[from] egomotion_core::Error),
    #[error(transparent)]
    Models(#[from] egomotion_models::Error),
    #[error(transparent)]
    Candle(#[from] candle_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),
    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, HarnessError>;
