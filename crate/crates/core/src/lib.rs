//! Core of a DEUS node: identities and signatures, digital cards, the
//! account store, the Barker attention list, the transfer core and the Soul
//! subsystems of providers, concerned persons and consumers.

mod b64;
pub mod barker;
pub mod card;
pub mod clock;
pub mod identity;
pub mod node;
pub mod sim;
pub mod soul;
pub mod store;
pub mod timefmt;
pub mod transfer;

pub use node::{Decided, Error, Node, NodeOptions, ReceiveOutcome};
