pub mod cube;
pub mod geodesy;
pub mod geom;
pub mod io;
pub mod georef;
pub mod optim;
pub mod par;
pub mod raycast;
pub mod refine;
pub mod ortho;
pub mod sim;
pub mod pipeline;
