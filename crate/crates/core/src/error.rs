use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid environment: {}", .0.join("; "))]
    InvalidEnvironment(Vec<String>),
    #[error("start pose lies inside an inflated obstacle")]
    InfeasibleStart,
    #[error("no collision-free route to the goal")]
    NoRoute,
    #[error("trajectory entered obstacle {obstacle} at sample {sample}")]
    Collision { obstacle: usize, sample: usize },
    #[error("no feasible start poses in the grid")]
    EmptyDataset,
    #[error("trajectories end in different goal cells")]
    IncompatibleGoals,
    #[error("k-NN graph is disconnected ({components} components)")]
    DisconnectedGraph { components: usize },
    #[error("segment has zero arc length")]
    DegenerateSegment,
    #[error("local regression is rank deficient at sample {0}")]
    SingularLocalFit(usize),
    #[error("mode semantics need exactly 3 modes, got {0}")]
    SemanticsUndefined(usize),
    #[error("PWA rollout diverged at step {0}")]
    Diverged(usize),
    #[error("time-to-go features are degenerate")]
    DegenerateFeatures,
    #[error("no wavefront source lies in free space")]
    NoFreeSource,
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("invalid measurement at index {0}")]
    InvalidMeasurement(usize),
    #[error("unsupported artifact: {0}")]
    UnsupportedArtifact(String),
    #[error("stage {stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn in_stage(self, stage: &str) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }
}
