pub mod field;
pub mod geometry;
pub mod isosurface;
pub mod layout;
pub mod pseudo;
pub mod optimize;
pub mod protocol;
