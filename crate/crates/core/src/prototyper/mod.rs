//! The prototyping system: module descriptors, a registry, and the composer
//! that produces the application XML the core starts from.

pub mod app;
pub mod descriptor;
pub mod registry;

pub use app::{
    build_app, compare_versions, compose_app, parse_app, validate_against_registry, validate_app, AppModule,
    AppSpec, ComposeError, ComposeRequest, Selection, Violation,
};
pub use descriptor::{parse_descriptor, ArgType, MethodArg, MethodSpec, ModuleDescriptor};
pub use registry::{Registry, RegistryError};
