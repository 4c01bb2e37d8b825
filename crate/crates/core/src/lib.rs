//! Coupled cardiac electromechanics on two-dimensional unstructured meshes.
//!
//! The engine couples monodomain electrophysiology (ten Tusscher–Panfilov 2006
//! human ventricular kinetics, P1 finite elements on a fine triangle mesh) to
//! incompressible Mooney-Rivlin mechanics (P2/P1 Taylor-Hood elements on an
//! embedded coarse mesh). It reproduces spiral-wave stability experiments on
//! healthy and failing tissue: ionic remodelling, gap-junction remodelling, and
//! carved fibrotic patches.
//!
//! Module map:
//! - [`linalg`]: CSR sparse matrices, restarted GMRES, ILUT preconditioning.
//! - [`mesh`]: unstructured square meshes, uniform refinement with an
//!   embedding map, fibrosis carving, plain-text mesh I/O.
//! - [`cell`]: the ionic membrane model, restitution variants, heart-failure
//!   scaling, active-tension kinetics, single-cell pacing protocols.
//! - [`ep`]: monodomain reaction-diffusion stepping (Crank-Nicolson diffusion,
//!   explicit reaction), conduction-velocity measurement, snapshot writers.
//! - [`mech`]: hyperelastic stress, residual assembly, matrix-free
//!   Newton-Krylov with a finite-difference-sampled ILUT preconditioner.
//! - [`sim`]: experiment configuration, spiral initiation, the coupled run
//!   loop, stability classification, sweeps, and checkpointing.

pub mod cell;
pub mod ep;
pub mod linalg;
pub mod mech;
pub mod mesh;
pub mod sim;
