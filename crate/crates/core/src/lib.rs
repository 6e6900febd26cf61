//! First and second eigenpairs of the (dynamic) p-Laplacian on rectangular
//! and periodic 2D domains, level-set extraction and Cheeger ratios.

pub mod dynamics;
pub mod fem;
pub mod linalg;
pub mod mesh;
pub mod eigensolver;
pub mod cheeger;
pub mod experiment;
