//! Abstract perspective change for spatial questions.
//!
//! A camera image is reduced to a scene abstraction (labels, 3D positions,
//! facing directions), re-expressed in a reference object's frame, and
//! handed back to a vision-language model either as coordinates or as an
//! image of coloured cubes.

pub mod clients;
pub mod eval;
pub mod geometry;
pub mod pipeline;
pub mod prompt;
pub mod raster;
pub mod render;
pub mod runner;
pub mod scene;
pub mod synth;

pub use geometry::{transform_scene, DepthMap, GeometryError, PixelMask, RigidTransform};
pub use raster::{Rgb, RgbImage};
pub use render::{ColorMap, ColorName, RenderError, RenderSettings};
pub use scene::{load_scene, save_scene, CameraModel, Frame, ObjectAbstraction, PixelRect, SceneAbstraction, SceneError, Vec3};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/scenes.md")]
    mod scenes {}
    #[doc = include_str!("../../../book/src/rendering.md")]
    mod rendering {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
    #[doc = include_str!("../../../book/src/benchmarks.md")]
    mod benchmarks {}
    #[doc = include_str!("../../../book/src/replay.md")]
    mod replay {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
