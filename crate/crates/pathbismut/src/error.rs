use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{name} = {value} is not an integer multiple of dt = {dt}")]
    NonCommensurate {
        name: &'static str,
        value: f64,
        dt: f64,
    },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("time {0} is not a grid point")]
    OffGrid(f64),
    #[error("size mismatch: {0}")]
    SizeMismatch(String),
    #[error("{n} particles exceed the cap of {cap}")]
    TooLarge { n: usize, cap: usize },
    #[error("grid mismatch")]
    GridMismatch,
    #[error("non-finite state at step {step} for particle {particle}")]
    NonFinite { step: usize, particle: usize },
    #[error("diffusion matrix is singular at t = {0}")]
    SingularSigma(f64),
    #[error("model `{0}` does not have additive noise")]
    ModelNotAdditive(String),
    #[error("model `{0}` has no Hamiltonian block structure")]
    ModelNotHamiltonian(String),
    #[error("model `{0}` has a diffusion that is not a function of the current state only")]
    ModelSigmaNotStateOnly(String),
    #[error("horizon T = {t_end} is too short for memory r0 = {r0} at dt = {dt}")]
    HorizonTooShort { t_end: f64, r0: f64, dt: f64 },
    #[error("Gram matrix is numerically singular (smallest singular value {0:e})")]
    SingularGram(f64),
    #[error("control would anticipate the noise: {0}")]
    AnticipatingControl(String),
    #[error("test functional `{0}` has no gradient")]
    MissingGradient(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("malformed path file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
