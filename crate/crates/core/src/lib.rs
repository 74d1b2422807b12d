pub mod bench;
pub mod dbm;
pub mod ic_runtime;
pub mod object_model;
pub mod x86;
pub mod exec_oracle;
pub mod native;
