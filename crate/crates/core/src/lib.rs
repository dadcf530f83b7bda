pub mod corpus;
pub mod decoding;
pub mod evalkit;
pub mod gradsuite;
pub mod latex;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod train;
pub mod treebank;
pub mod workflow;
