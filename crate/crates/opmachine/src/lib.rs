//! Simulation toolkit for carousel operator machines on `l2_d (+) X^{d-1}`:
//! exact single-block carousels, sphere nets and feed enumerations, growth
//! schedules, the assembled block operator, and a compact-operator orbit
//! trichotomy, plus a CLI for reproducible experiment traces.

pub mod carousel;
pub mod cli;
pub mod exact;
pub mod jordan;
pub mod machine;
pub mod norm;
pub mod rational;
pub mod schedule;
pub mod sphere;
pub mod symbasis;
