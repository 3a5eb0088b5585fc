//! Hierarchical-matrix machinery for the second-moment analysis of strongly
//! elliptic boundary value problems with random loads.
//!
//! The pipeline assembles the P1 finite element stiffness matrix `A` and the
//! Galerkin correlation matrix `C_f` of a covariance kernel in H-matrix
//! format, factorizes `A ≈ L·U` by a blockwise H-LU, and solves the matrix
//! equation `A·C_u·Aᵀ = C_f` by iterative refinement.  The diagonal of `C_u`
//! yields the pointwise variance of the solution field.
//!
//! Modules follow the stages of that pipeline:
//! - [`mesh_fem`]: simplicial meshes, P1 assembly, mean solves
//! - [`clustering`]: geometric cluster trees and block partitions
//! - [`lowrank`]: rank-k blocks, truncation, ACA, pivoted Cholesky
//! - [`kernels`]: covariance kernels and their Galerkin entry generators
//! - [`hmatrix`]: the H-matrix container and its approximate arithmetic
//! - [`solver`]: H-LU driven iterative refinement and variance extraction

pub mod clustering;
pub mod geometry;
pub mod hmatrix;
pub mod kernels;
pub mod lowrank;
pub mod mesh_fem;
pub mod solver;
