//! Live control service around the pipeline kernel.

pub mod api;
pub mod net;
pub mod plane;

pub use api::{ApiRequest, ControlCommand, RejectReason, RequestBody, ServerEvent, TopologySnapshot};
pub use net::{serve_tcp, serve_ws, Client};
pub use plane::{ControlPlane, ServiceConfig};
