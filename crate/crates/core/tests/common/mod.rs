#![allow(dead_code)]

pub mod dense;
pub mod grads;
pub mod partition;
