#![allow(dead_code)]

pub mod gradcases;
pub mod pconv;
pub mod oracles;
