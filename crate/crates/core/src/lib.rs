pub mod clustering;
pub mod formats;
pub mod graph;
pub mod merge;
pub mod model;
pub mod parallel;
pub mod pipeline;
pub mod scene;
pub mod sim3;
