//! Editable radiance fields conditioned on Gaussian primitives.
//!
//! A query point's feature is the Mahalanobis-weighted sum of hash-grid
//! features sampled at the means of the nearest Gaussians whose confidence
//! spheres contain it. A small MLP maps that feature and the view direction
//! to density and color, which are composited along camera rays. Moving
//! the Gaussians after training moves the appearance with them.

pub mod config;
pub mod edit;
pub mod error;
pub mod field;
pub mod hashgrid;
pub mod io;
pub mod render;
pub mod rtgps;
pub mod scene;
pub mod splash;
pub mod trainer;
pub mod verify;

pub use config::RunConfig;
pub use error::{GenieError, Result};
pub use field::{Activation, FieldConfig, FieldNetwork};
pub use hashgrid::{HashGrid, HashGridConfig};
pub use io::checkpoint::{load_checkpoint, save_checkpoint, SceneBundle};
pub use render::{render_image, Image, RenderConfig};
pub use rtgps::{NeighborResult, ProximityIndex, RadiusMode};
pub use scene::{Camera, Gaussian, GaussianSet, Ray, Vec3};
pub use splash::{FeatureMode, SplashConfig};
pub use trainer::{TrainConfig, Trainer};
