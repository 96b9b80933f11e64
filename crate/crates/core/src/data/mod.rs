//! Scenes, annotation ingestion and synthetic generation.

pub mod ethucy;
mod scene;
pub mod synthetic;

pub use ethucy::{leave_one_out_splits, load_ethucy, parse_annotations, RawAnnotation, Split, WindowSpec};
pub use scene::{read_scenes, write_scenes, Mode, ModeLabel, Scene, SCENE_FORMAT, SCENE_VERSION};
pub use synthetic::{generate_synthetic, SyntheticParams, SyntheticSpec};
