//! Synthetic colored-shapes scenes with exact annotations, a planar Gaussian
//! mixture for sampler checks, and the evaluation metrics.

mod gmm;
mod metrics;
mod shapes;
mod sweep;

pub use gmm::{fit_by_nearest_mean, ClusterFit, Gmm2};
pub use metrics::{
    binding_accuracy, binds, frechet_gaussian_distance, nearest_palette, sqrt_psd, symmetric_eigen, toy_fid,
    GaussianStats, RandomProjection,
};
pub use shapes::{
    cell_words, generate_dataset, load_dataset, random_scene, save_dataset, to_train_items, Color, ObjectSpec,
    SceneSpec, Shape, BACKGROUND, BLOB_FILE, MANIFEST_FILE,
};
pub use sweep::{
    eval_item_seed, expert_ablation, AblationRow, eval_scenes, generate, pareto_csv, pareto_sweep, prompt_condition, EvalSettings, ParetoPoint,
};
