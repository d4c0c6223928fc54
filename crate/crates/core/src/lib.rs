pub mod blob;
pub mod clock;
pub mod semver;
pub mod store;
pub mod changes;
pub mod pipeline;
pub mod scrapers;
pub mod analyses;
pub mod replay;
pub mod config;
pub mod logging;
pub mod cli;
