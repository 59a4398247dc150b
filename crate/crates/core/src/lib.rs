pub mod canonical;
pub mod crypto;
pub mod digest;
pub mod http;
pub mod log;
pub mod merkle;
pub mod model;
pub mod monitor;
pub mod scenario;
pub mod time;
pub mod value;
pub mod verifier;
