pub mod grad;
pub mod lora;
pub mod numerics;
pub mod svd_analysis;
pub mod retention;
pub mod updater;
pub mod tasks;
pub mod training;
pub mod bench;
pub mod app;
