//! Geometry of representation spaces.
//!
//! Dissimilarity matrices built from per-stimulus representations, unbiased
//! linear CKA, and the Gromov-Wasserstein discrepancy between two
//! dissimilarity matrices under the quadratic loss
//!
//! ```text
//! GW(C1, C2, p, q) = min_{T ∈ Π(p, q)} Σ_{i,j,k,l} |C1[i,k] − C2[j,l]|² T[i,j] T[k,l]
//! Π(p, q) = { T ≥ 0 : T 1 = p, Tᵀ 1 = q }
//! ```

mod cka;
mod coupling;
mod gw;
mod oracle;
pub mod ot;
mod rdm;

pub use cka::{cka_unbiased, hsic_unbiased};
pub use coupling::{validate_coupling, Coupling, MassVector, Violation};
pub use gw::{gw_distance, gw_objective, GwResult, GwSolverConfig};
pub use oracle::gw_permutation_oracle;
pub use rdm::{build_rdm, default_rdm_pca_dims, Rdm};
