//! Content-based routing with a containment index kept behind a simulated
//! trusted boundary, plus an encrypted-matching baseline and workload tools.

pub mod aspe;
pub mod envelope;
pub mod index;
pub mod model;
pub mod publisher;
pub mod router;
pub mod workload;

pub use index::{ContainmentIndex, IndexError, IndexStats, NodeId};
pub use model::{
    canonicalize, covers, matches, AttributeValue, Bound, ClientId, Constraint, Interval,
    ModelError, PubId, Publication, PublicationHeader, SubId, Subscription, Test,
};
