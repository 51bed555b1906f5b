use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("grid: {0}")]
    Grid(String),

    #[error("schema: {0}")]
    Schema(String),

    #[error("station {station} at ({lat}, {lon}) falls outside the grid")]
    OutsideGrid { station: String, lat: f64, lon: f64 },

    #[error(
        "dataset too short to split: {hours} hours, each segment needs a window plus target \
         ({window} + 1); minimum length is {min_hours}"
    )]
    TooShortToSplit {
        hours: usize,
        window: usize,
        min_hours: usize,
    },

    #[error("dataset format version {found}, this build reads version {expected}")]
    DatasetVersion { found: u32, expected: u32 },

    #[error("dataset file {file}: expected {expected} bytes, found {found}")]
    DatasetLength {
        file: String,
        expected: u64,
        found: u64,
    },

    #[error("dataset file {file}: checksum mismatch")]
    DatasetChecksum { file: String },

    #[error("correlation report covers no channel named {0}")]
    ChannelNotInReport(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("model: {0}")]
    Model(String),

    #[error("unknown model kind {kind:?}, available: {available}")]
    UnknownModel { kind: String, available: String },

    #[error("training: {0}")]
    Train(String),

    #[error(
        "training diverged at epoch {epoch}: {detail}; parameters restored from the last \
         finished epoch"
    )]
    Diverged { epoch: usize, detail: String },

    #[error(
        "unstable simulation config: 4*diffusion + 2*wind_scale = {value:.4} exceeds the \
         explicit-scheme bound 0.5"
    )]
    UnstableConfig { value: f64 },

    #[error("synth: {0}")]
    Synth(String),

    #[error("no AQI breakpoints for pollutant {0}")]
    PollutantNotInTable(String),

    #[error(transparent)]
    Tensor(#[from] tensorcore::TensorError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
