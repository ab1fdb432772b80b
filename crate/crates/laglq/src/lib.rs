pub mod matkit;
pub mod riccati;
pub mod extended_lqr;
pub mod dsofu;
pub mod estimation;
pub mod agents;
pub mod simlab;
