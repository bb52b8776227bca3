//! Identifiers and small shared enums.

use std::fmt;

use serde::{Deserialize, Serialize};

macro_rules! id_type {
    ($(#[$m:meta])* $name:ident, $inner:ty, $prefix:literal) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub $inner);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($prefix, "{}"), self.0)
            }
        }
    };
}

id_type!(RequestId, u64, "req-");
id_type!(InstanceId, u64, "inst-");
id_type!(NodeId, u32, "node-");
id_type!(
    /// Index into the model registry.
    ModelId,
    u32,
    "model-"
);
id_type!(OpId, u64, "op-");

pub type Bytes = u64;

pub const KIB: Bytes = 1 << 10;
pub const MIB: Bytes = 1 << 20;
pub const GIB: Bytes = 1 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HardwareClass {
    Cpu,
    Gpu,
}

impl HardwareClass {
    pub fn as_str(self) -> &'static str {
        match self {
            HardwareClass::Cpu => "cpu",
            HardwareClass::Gpu => "gpu",
        }
    }
}

impl fmt::Display for HardwareClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}
