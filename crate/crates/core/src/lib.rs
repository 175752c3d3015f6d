pub mod linalg;
pub mod mesh;
pub mod par;
pub mod physics;
pub mod mms;
pub mod spatial;
pub mod timestepping;
pub mod diagnostics;
pub mod scenarios;
