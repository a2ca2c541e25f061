use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("infeasible grid: {0}")]
    Bound(String),
    #[error("constructed network is invalid: {0}")]
    Invalid(String),
    #[error("dangling reference: {0}")]
    Reference(String),
    #[error("unsupported network document version {0}")]
    Version(u32),
    #[error("cannot parse network document: {0}")]
    Parse(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DemandError {
    #[error("{0}")]
    Domain(String),
    #[error("network has no origin-destination pairs")]
    NoPairs,
    #[error("trip table: {0}")]
    Csv(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("no route from {from} to {to}")]
    Unreachable { from: crate::net::NodeId, to: crate::net::NodeId },
    #[error("vehicle conservation breached at t={clock}: generated {generated}, in network {in_network}, waiting {waiting}, completed {completed}")]
    Conservation {
        clock: f64,
        generated: usize,
        in_network: usize,
        waiting: usize,
        completed: usize,
    },
    #[error("storage exceeded on {link} at t={clock}: {occupancy} > {capacity}")]
    Storage {
        link: crate::net::LinkId,
        clock: f64,
        occupancy: usize,
        capacity: usize,
    },
    #[error("invalid simulation input: {0}")]
    Input(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("{0} lane length is zero")]
    ZeroLength(&'static str),
    #[error("trip {0} exits before it is generated")]
    ExitBeforeGeneration(usize),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("cache does not belong to this network")]
    StaleCache,
    #[error("non-finite gradient, update rejected")]
    NonFiniteGradient,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Error)]
pub enum PpoError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Demand(#[from] DemandError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("non-finite {what}: {detail}")]
    NonFinite { what: &'static str, detail: String },
    #[error("length mismatch: {0}")]
    Length(String),
    #[error("{0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
