//! Temporary dev probe. Not part of the deliverable.
