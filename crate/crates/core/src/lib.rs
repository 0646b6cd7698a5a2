//! Cross-cultural recipe retrieval with culture-specific debiasing of the
//! recipe embedding space.

pub mod corpus;
pub mod debias;
pub mod dictionaries;
pub mod embedding;
pub mod encoders;
pub mod eval;
pub mod retrieval;
pub mod tensor;
