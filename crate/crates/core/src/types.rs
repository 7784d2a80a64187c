//! Identifier newtypes shared across modules.

use std::fmt;

use serde::{Deserialize, Serialize};

macro_rules! id_type {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(
            Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
        )]
        pub struct $name(pub u64);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }
    };
}

id_type!(
    /// Conversation identifier, stable across turns.
    ConvId
);
id_type!(ChunkId);
id_type!(
    /// One turn of one conversation.
    ReqId
);

/// Physical slot index within one tier.
pub type Slot = usize;
