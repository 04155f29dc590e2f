pub mod ablation;
pub mod analysis;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod init;
pub mod model;
pub mod prompt;
pub mod runs;
pub mod seeds;
pub mod tensor;
pub mod train;

pub use ablation::{run_ablation, variant_configs, AblationAxis, AblationPlan, AblationReport};
pub use analysis::{
    expert_utilization, export_features, extract_pathway, manifold_metrics, pathway_cosine, pathway_mae,
    ManifoldReport, PathwayRecord, UtilizationTable,
};
pub use autodiff::{Activation, Graph, Var};
pub use data::{Batch, Dataset, Example, GeneratorSpec, TaskDataset, TaskSpec, TrainingSet};
pub use error::{Error, Result};
pub use init::Init;
pub use model::{pool_features, ForwardTrace, LayerRouting, Model, ModelConfig, ParamGroup};
pub use prompt::{count_trainable_params, MeptLayerParams, ParamReport, RoutingDecision, RoutingMode};
pub use seeds::derive_seed;
pub use tensor::Tensor;
pub use train::{evaluate, train, EvalReport, LearningSpace, Optimizer, Scheme, TrainConfig, TrainLog};
