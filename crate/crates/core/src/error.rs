use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("density {value} veh/m outside [0, {jam}]")]
    DensityDomain { value: f64, jam: f64 },

    #[error("speed {value} m/s outside [0, {max}]")]
    SpeedDomain { value: f64, max: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("CFL condition violated: V*dt = {lhs} m > 0.9*dx = {rhs} m")]
    Cfl { lhs: f64, rhs: f64 },

    #[error("numerical error in cell {cell}: density {value} veh/m after update")]
    Numerical { cell: usize, value: f64 },

    #[error("length mismatch: {0}")]
    Length(String),

    #[error("command {value} m/s for CAV {id} is outside U = [{min}, {max}] and is not 0")]
    ControlOutOfRange { id: u32, value: f64, min: f64, max: f64 },

    #[error("no stabilizing feedback gain: {0}")]
    Stabilization(String),

    #[error("Lyapunov series did not converge within {0} terms")]
    LyapunovDivergence(usize),

    #[error("enumeration budget exceeded: {needed} candidates > budget {budget}")]
    Budget { needed: f64, budget: f64 },

    #[error("config error at {path}: {message}")]
    Config { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}
