use thiserror::Error;

use crate::comm::CommError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("neuron id encoding overflow: {0}")]
    Encoding(String),

    #[error("weight {0} mV outside the representable range (|w| < 128 mV)")]
    WeightRange(f64),

    #[error("unknown preset `{name}`; available presets: {available}")]
    UnknownPreset { name: String, available: String },

    #[error("invalid grid: {0}")]
    Grid(String),

    #[error("cannot partition {columns} columns ({width}x{height}) onto {ranks} ranks; nearest feasible rank counts: {nearest:?}")]
    InfeasiblePartition {
        width: u32,
        height: u32,
        columns: u32,
        ranks: u32,
        nearest: Vec<u32>,
    },

    #[error("neuron {0} is outside the grid")]
    NeuronOutOfRange(u64),

    #[error("invalid connectivity parameter: {0}")]
    Connectivity(String),

    #[error("synapse targets neuron {target:#x} which is not hosted on rank {rank}")]
    NonLocalTarget { target: u32, rank: u32 },

    #[error("event at t={event} ms precedes last update at t={last} ms")]
    Sequencing { event: f64, last: f64 },

    #[error(transparent)]
    Comm(#[from] CommError),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("analysis: {0}")]
    Analysis(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
