pub mod calibrate;
pub mod checkpoint;
pub mod error;
pub mod hexfloat;
pub mod linalg;
pub mod losses;
pub mod overlap;
pub mod specfn;
pub mod stats;
pub mod synth;
pub mod trainer;
pub mod verify;
pub mod vmf;

pub use error::{Result, VmfError};
