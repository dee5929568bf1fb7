//! Hardware-free CHAMP edge pipeline: capability cartridges on a simulated
//! shared bus, orchestrated by a hot-swap aware kernel.

pub mod bus;
pub mod cartridge;
pub mod experiments;
pub mod gallery;
pub mod kernel;
pub mod payload;
pub mod protocol;
pub mod scenario;
pub mod time;

pub use time::SimTime;
