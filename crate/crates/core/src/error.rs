use thiserror::Error;

/// Everything that can go wrong while building, evaluating or
/// differentiating a graph.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid variable name `{0}`: expected [A-Za-z_][A-Za-z0-9_]*")]
    InvalidName(String),

    #[error("constant must be finite, got {0}")]
    NonFiniteConstant(f64),

    #[error("node #{index} does not belong to this graph")]
    ForeignNode { index: u32 },

    #[error("`{0}` is not a variable of this graph")]
    UnknownVariable(String),

    #[error("node #{0} is not a variable")]
    NotAVariable(u32),

    #[error("at least one output is required")]
    NoOutputs,

    #[error("at least one derivative request is required")]
    NoRequests,

    #[error("missing values for input variables: {}", .0.join(", "))]
    MissingInputs(Vec<String>),

    #[error("{op} produced a non-finite value at node #{node} (inputs: {inputs:?})")]
    NonFiniteValue {
        node: u32,
        op: String,
        inputs: Vec<f64>,
    },

    #[error("{op} is not differentiable at {point}{}", node.map(|n| format!(" (node #{n})")).unwrap_or_default())]
    Domain {
        op: String,
        point: f64,
        node: Option<u32>,
    },

    #[error("calc tree has not been evaluated")]
    NotEvaluated,

    #[error("value of node #{0} elided by storage analysis")]
    Elided(u32),

    #[error("derivative order must be at least 1")]
    ZeroOrder,

    #[error("derivative order {order} exceeds the order cap {cap}")]
    OrderCap { order: u32, cap: u32 },

    #[error("binomial coefficient overflows 64 bits")]
    Overflow,

    #[error("no seed set for output node #{0}")]
    MissingSeed(u32),

    #[error("node #{0} is not an output of this plan")]
    NotAnOutput(u32),

    #[error("derivative {0} was not requested")]
    NotRequested(String),

    #[error("backpropagate has not been run")]
    NotBackpropagated,

    #[error("plan and calc tree were built over different graphs")]
    GraphMismatch,

    #[error("request syntax error at column {column}: {message}")]
    RequestSyntax { column: usize, message: String },

    #[error("jets have mismatched variables or order")]
    JetMismatch,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
