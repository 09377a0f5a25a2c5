//! Teacher and student detectors with their losses.

pub mod backbone;
pub mod checkpoint;
pub mod hungarian;
pub mod loss;
pub mod student;
pub mod teacher;

pub use backbone::{image_tensor, Backbone, BackboneConfig, VisualEncoder};
pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use hungarian::hungarian_match;
pub use loss::{regression_loss, teacher_loss};
pub use student::{Detection, Student, StudentConfig, Target};
pub use teacher::{apply_box_deltas, BoxPredictor, StagePrediction, Teacher, TeacherConfig, TeacherPrompt, TrainedTeacher};
