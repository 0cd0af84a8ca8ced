//! Day-ahead community market for energy, renewable uncertainty and carbon
//! allowances, cleared by a decentralized Relax–ADMM–Contraction loop.

pub mod agents;
pub mod cli;
pub mod conic;
pub mod coordinator;
pub mod market_model;
pub mod scenario;
pub mod uncertainty;
pub mod validation;
