//! Attention-guided synthetic question generation for dense passage retrieval.

pub mod attention;
pub mod corpus;
pub mod encoder;
pub mod evalharness;
pub mod experiment;
pub mod filtering;
pub mod lexical;
pub mod ner;
pub mod pipeline;
pub mod protocol;
pub mod qgen;
pub mod text;
pub mod tokenizer;
pub mod toyworld;
