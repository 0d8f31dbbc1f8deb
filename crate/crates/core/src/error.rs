use thiserror::Error;

#[derive(Debug, Error)]
pub enum GppError {
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparams(String),

    #[error("ill-conditioned covariance (condition estimate {estimate:.3e}) over locations {locations:?}")]
    Conditioning { estimate: f64, locations: Vec<usize> },

    #[error("unknown reward kind `{0}`")]
    UnknownRewardKind(String),

    #[error("missing parameter `{param}` for reward kind `{kind}`")]
    MissingParam { kind: String, param: String },

    #[error("invalid reward parameter: {0}")]
    InvalidParam(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("invalid partition parameters (n = {n}, tau = {tau})")]
    InvalidPartition { n: usize, tau: f64 },

    #[error("no feasible (tau, n) with n < {n_max} for lambda = {lambda} (sigma = {sigma}, l1 + L = {lipschitz})")]
    Infeasible {
        lambda: f64,
        sigma: f64,
        lipschitz: f64,
        n_max: usize,
    },

    #[error("enumeration budget exceeded: {0}")]
    Budget(String),

    #[error("unknown path {0:?}")]
    UnknownPath(Vec<usize>),

    #[error("invalid action model: {0}")]
    ActionModel(String),

    #[error("field error: {0}")]
    Field(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("cache error: {0}")]
    Cache(String),

    #[error("step {step}: {source}")]
    Episode {
        step: usize,
        #[source]
        source: Box<GppError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GppError>;
