//! Parameter-efficient modifications: design specs, their parameters, the
//! Δh operations and attachment to a model.

pub mod attach;
pub mod design;
pub mod method;
pub mod ops;
pub mod params;

pub use attach::{
    attach_modifications, attach_prompt, attach_specs, bitfit_attach, merge_lora, prompt_tuning_attach,
    Attachments,
};
pub use design::{
    Composition, DesignSpec, FunctionalForm, InitScheme, InsertionForm, PrefixReparam, SiteFilter,
};
pub use method::{build_mam, mam_specs, Method, Placement, DEFAULT_SCALE};
pub use params::{AdapterParams, PeftParams, PrefixMlp, PrefixParams, PromptParams};
