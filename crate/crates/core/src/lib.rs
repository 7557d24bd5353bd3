pub mod anyres;
pub mod backends;
pub mod engine;
pub mod explorer;
pub mod protocol;
pub mod raster;
pub mod slide;
pub mod stats;
pub mod supervisor;
