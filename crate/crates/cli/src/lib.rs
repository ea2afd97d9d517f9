//! Support library of the `daxs` command: input loading, the end-to-end
//! pipelines, heatmap rendering, the content-hash store and the HTTP
//! service.

pub mod input;
pub mod jobs;
pub mod pipeline;
pub mod png;
pub mod service;
pub mod store;
