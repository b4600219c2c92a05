//! Confidential distributed aggregation over a Kademlia tree overlay.

pub mod adversary;
pub mod algebra;
pub mod container;
pub mod harness;
pub mod identity;
pub mod overlay;
pub mod protocol;

mod serde_hex;

pub use algebra::{Aggregate, AlgebraKind, AlgebraSpec};
pub use container::{AggregateContainer, ChainVerdict, ConfirmedContainer, SubtreeId};
pub use harness::{MetricsReport, ScenarioConfig, Simulation, VerifyOutcome};
pub use identity::{Kid, KidMode};
pub use protocol::{AbortMode, DeviationProof, Phase};
