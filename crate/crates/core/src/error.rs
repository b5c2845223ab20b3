use alloc::string::String;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    /// A trajectory state with zero energy cannot be scored.
    #[error("degenerate state: prompt {prompt_id}, timestep {timestep}")]
    DegenerateState { prompt_id: usize, timestep: usize },

    #[error("training diverged in block {block} at epoch {epoch}: loss = {loss}")]
    Training { block: usize, epoch: usize, loss: f64 },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
