//! Evaluation: Fréchet distance, k-NN precision/recall, the few-shot
//! protocol, guidance sweeps and image mosaics.

mod distance;
mod fewshot;
mod images;

pub use distance::{
    euclidean, frechet_distance, knn_precision_recall, knn_radii, mean_pairwise_distance,
    FeatureSet,
};
pub use fewshot::{
    extract_features, fewshot_evaluate, guidance_sweep, sweep_csv, ConditionalSampler,
    CopyingSampler, FewShotConfig, MetricReport, PoolSampler,
};
pub use images::{read_png, write_mosaic, write_pr_scatter, write_tensor_file};
