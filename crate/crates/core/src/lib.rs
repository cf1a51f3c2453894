pub mod agents;
pub mod commander;
pub mod domain;
pub mod endpoint;
pub mod evaluation;
pub mod math;
pub mod pipeline;
pub mod reply;
pub mod router;
pub mod timing;
