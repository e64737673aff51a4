#![allow(dead_code)]

pub mod grad;
pub mod models;
pub mod pvum;
