pub mod acp;
pub mod bds;
pub mod error;
pub mod hardware;
pub mod kernel;
pub mod oracle;
pub mod topology;
pub mod protocols;
pub mod resource;
pub mod scenario;
pub mod sim;
