//! Dipole-inversion physics: k-space kernel, forward field model, the
//! thresholded-division baseline, and synthetic training data.

mod fft;
mod forward;
mod kernel;
mod noise;
mod patches;
mod phantom;
mod volume;

pub use fft::signed_frequency;
pub use forward::{
    analytic_sphere_field, apply_spectral_multiplier, forward_field, forward_field_padded, forward_field_with_residue,
    tkd_invert,
};
pub use kernel::{make_dipole_kernel, DipoleKernel};
pub use noise::{add_noise, add_noise_in_place, NoiseConfig};
pub use patches::{anchors_per_axis, extract_patches, PatchPair};
pub use phantom::{generate_phantom, paint, PhantomSpec, Shape, Source, PHANTOM_KEYS};
pub use volume::Volume;
