//! Persistence, synthetic data and toy training.

pub mod dataset_dir;
pub mod model_file;
pub mod pnm;
pub mod shapes;
pub mod train;

pub use model_file::{load_model, save_model};
pub use shapes::{generate_shapes, Annotation, BoxRect, ShapesConfig, ShapesDataset};
pub use train::{accuracy, train_toy, TrainConfig, TrainOutcome};
