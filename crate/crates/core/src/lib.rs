//! Facial motion retargeting toolkit.
//!
//! A reduced multilinear face model with weak-perspective landmark projection,
//! a constrained landmark fitter, the 9x9x5 grid codec used by joint
//! detection/retargeting networks, training losses, detection and landmark
//! metrics, frame-to-frame tracking and blendshape rig transfer.
//!
//! ```
//! use facegrid::fitting::{default_init, fit_params, FitConfig};
//! use facegrid::morphable_model::{generate_synthetic_tensor, project_landmarks, FaceParams};
//!
//! let tensor = generate_synthetic_tensor(42);
//! let mut truth = FaceParams::neutral(60.0);
//! truth.pose.translation = [2.0, 2.5, 0.0];
//! let observed = project_landmarks(&tensor, &truth);
//!
//! let init = default_init(&tensor, &observed);
//! let fit = fit_params(&tensor, &observed, &init, &FitConfig::default()).unwrap();
//! assert!(fit.final_rmse < 1e-6);
//! ```

pub mod detection_eval;
pub mod error;
pub mod fitting;
pub mod grid_codec;
pub mod io;
pub mod landmark_metrics;
pub mod loss;
pub mod morphable_model;
pub mod retarget;
pub mod scene;

pub use error::{Error, Result};
