#![allow(dead_code)]

pub mod fem;
pub mod images;
